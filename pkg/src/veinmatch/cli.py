"""``veinmatch`` command-line interface.

Every verb echoes its resolved configuration as one JSON line starting with
``# config``, writes its artifacts only under ``--out`` and exits with 0 on
success, 1 on a domain error and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from . import gradcheck as gc
from . import plots
from .data import (DatasetSplit, LabeledSample, SynthSpec, identities, load_dataset, save_dataset,
                   split, stack_tensors, synth_generate)
from .errors import VeinmatchError
from .gallery import enroll, verify
from .imaging import EnhanceMethod, Perturbation, crop_roi, enhance, perturb, read_image
from .matching import (DEFAULT_CANDIDATES, cosine_similarity, decide, evaluate, kmeans_threshold,
                       records_from_csv, records_to_csv, report_json, similarity_matrix, sweep_thresholds)
from .model import BlockSpec, ModelSpec, embed_batched, extract_embedding, load_model, save_model
from .training import TrainConfig, train

PROG = "veinmatch"
VERBS = ("synth", "preprocess", "train", "enroll", "verify", "match", "threshold", "evaluate",
         "perturb", "gradcheck")


class UsageError(Exception):
    """Bad command line detected after parsing (exit code 2)."""


# --- parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file of option defaults (flags win)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def _split_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="dataset root <id>/<session>/<image>")
    p.add_argument("--held-out", type=int, default=0, help="identities reserved for matching")
    p.add_argument("--val-fraction", type=float, default=0.15)


def _perturb_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--perturb", choices=("blur", "noise", "rotate"))
    p.add_argument("--sigma", type=float, help="blur/noise standard deviation")
    p.add_argument("--angle", type=float, default=10.0, help="rotation in degrees")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Palm-vein verification toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("synth", help="generate a synthetic palm-vein dataset")
    _common(p)
    p.add_argument("--ids", type=int, default=10)
    p.add_argument("--images-per-session", type=int, default=6)
    p.add_argument("--side", type=int, default=64)

    p = sub.add_parser("preprocess", help="crop and enhance a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--enhance", choices=("none", "hist", "clahe", "laplacian", "log"), default="none")
    p.add_argument("--roi", type=int, help="centred square crop side in pixels")
    p.add_argument("--clip-limit", type=float, default=2.0)

    p = sub.add_parser("train", help="train the feature extractor")
    _common(p)
    _split_opts(p)
    p.add_argument("--theta", type=float, default=0.3)
    p.add_argument("--lambda", dest="lam", type=float, default=0.001)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--batch-p", type=int, default=4)
    p.add_argument("--batch-k", type=int, default=2)
    p.add_argument("--freeze", default="", help="comma-separated parameter groups or prefixes")
    p.add_argument("--penalty-scope", choices=("output", "all"), default="output")
    p.add_argument("--channels", default="16,32,64", help="channels per conv block")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("enroll", help="add a subject to a gallery")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--gallery", default="gallery.gallery.jsonl", help="file name under --out")
    p.add_argument("--subject", required=True)
    p.add_argument("--replace", action="store_true")
    p.add_argument("images", nargs="+", type=Path)

    p = sub.add_parser("verify", help="verify one probe image against an enrolled subject")
    _common(p, out_required=False)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--gallery", type=Path, required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--threshold", type=Path, help="threshold.json written by `threshold`")
    p.add_argument("--time", action="store_true")
    p.add_argument("--float32", action="store_true", help="single-precision inference")
    p.add_argument("probe", type=Path)

    p = sub.add_parser("match", help="score gallery (session 1) against probes (session 2)")
    _common(p)
    _split_opts(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--time", action="store_true")
    p.add_argument("--float32", action="store_true", help="single-precision inference for --time")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("threshold", help="calibrate an acceptance threshold from scores")
    _common(p)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--alpha-mode", choices=("kmeans", "sweep"), default="kmeans")
    p.add_argument("--candidates", help="comma-separated thresholds for the sweep")

    p = sub.add_parser("evaluate", help="confusion counts, AUC and MG for scored pairs")
    _common(p)
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-mode", choices=("fixed", "kmeans", "sweep"), default="kmeans")
    p.add_argument("--calibration-records", type=Path,
                   help="fit K-means on this pool instead of the evaluated one")
    p.add_argument("--ties", type=float, default=0.0, help="AUC credit for tied scores")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("perturb", help="matching quality under blur, noise and rotation")
    _common(p)
    _split_opts(p)
    _perturb_opts(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--alpha", type=float, help="fixed threshold; K-means on clean scores by default")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("gradcheck", help="finite-difference audit of gradients")
    _common(p, out_required=False)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--eps", type=float, default=1e-4)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {args.config} must hold a JSON object")
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    if "lambda" in doc:
        doc["lam"] = doc.pop("lambda")
    unknown = sorted(set(doc) - set(vars(args)))
    if unknown:
        raise UsageError(f"config {args.config} has unknown keys: {', '.join(unknown)}")
    # re-parse with the file as defaults so explicit flags still override it
    sub = parser._subparsers._group_actions[0].choices[args.verb]  # noqa: SLF001
    sub.set_defaults(**doc)
    return parser.parse_args(argv)


def _resolved(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, list):
            v = [str(x) for x in v]
        out["lambda" if k == "lam" else k] = v
    return out


# --- helpers --------------------------------------------------------------------

def _out(args) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _split_from(args) -> DatasetSplit:
    samples = load_dataset(args.data)
    if not samples:
        raise UsageError(f"{args.data}: dataset is empty")
    return split(samples, args.held_out, args.val_fraction)


def _match_sides(args, sp: DatasetSplit, samples_all: list[LabeledSample] | None = None):
    """Gallery/probe sides: the held-out identities, or every identity when none are held out."""
    if sp.gallery and sp.probes:
        return sp.gallery, sp.probes
    samples = samples_all if samples_all is not None else load_dataset(args.data)
    return [s for s in samples if s.session == 1], [s for s in samples if s.session == 2]


def _sample_id(s: LabeledSample) -> str:
    return f"{s.identity}/{s.session}/{s.index:03d}"


def _score(params, gallery: list[LabeledSample], probes: list[LabeledSample], probe_images=None):
    g = embed_batched(params, stack_tensors(gallery))
    if probe_images is None:
        q = embed_batched(params, stack_tensors(probes))
    else:
        q = embed_batched(params, np.stack([im.pixels[None] / 255.0 for im in probe_images]))
    return similarity_matrix(list(g), list(q), [_sample_id(s) for s in gallery],
                             [_sample_id(s) for s in probes], [s.identity for s in gallery],
                             [s.identity for s in probes])


def _timed_scores(params, gallery, probes, alpha: float = 0.5) -> list[float]:
    """Wall time of embed-one-probe + one cosine + decision, for every pair."""
    g = embed_batched(params, stack_tensors(gallery))
    lat = []
    for p in probes:
        x = stack_tensors([p])[0]
        for gi in g:
            t0 = time.perf_counter()
            decide(cosine_similarity(gi, extract_embedding(params, x)), alpha)
            lat.append(time.perf_counter() - t0)
    return lat


def _threads():
    """Cap BLAS threads when VEINMATCH_THREADS is set."""
    n = os.environ.get("VEINMATCH_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        count = int(n)
        if count < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"VEINMATCH_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=count)


# --- verbs ----------------------------------------------------------------------

def cmd_synth(args) -> None:
    spec = SynthSpec(identities=args.ids, images_per_session=args.images_per_session,
                     side=args.side, seed=args.seed)
    out = _out(args)
    written = save_dataset(out, synth_generate(spec))
    print(f"wrote {len(written)} images for {spec.identities} identities to {out}")


def cmd_preprocess(args) -> None:
    samples = load_dataset(args.data)
    method = None if args.enhance == "none" else EnhanceMethod(args.enhance, clip_limit=args.clip_limit)
    out_samples = []
    for s in samples:
        img = s.image
        if args.roi:
            img = crop_roi(img, img.width // 2, img.height // 2, args.roi)
        if method is not None:
            img = enhance(img, method)
        out_samples.append(LabeledSample(img, s.identity, s.session, s.index))
    written = save_dataset(_out(args), out_samples)
    print(f"wrote {len(written)} images to {args.out}")


def cmd_train(args) -> None:
    sp = _split_from(args)
    if not sp.validation:
        raise UsageError("validation split is empty; raise --val-fraction")
    try:
        channels = [int(c) for c in args.channels.split(",") if c]
    except ValueError:
        raise UsageError(f"--channels must be comma-separated integers, got {args.channels!r}") from None
    img = sp.train[0].image
    spec = ModelSpec(input_height=img.height, input_width=img.width,
                     blocks=tuple(BlockSpec(2, c, True) for c in channels),
                     num_classes=len(identities(sp.train)))
    if args.no_attention:
        spec = spec.with_attention(False)
    cfg = TrainConfig(theta=args.theta, lam=args.lam, lr=args.lr, batch_p=args.batch_p,
                      batch_k=args.batch_k, epochs=args.epochs, patience=args.patience, seed=args.seed,
                      freeze=tuple(f for f in args.freeze.split(",") if f),
                      penalty_scope=args.penalty_scope)
    out = _out(args)

    def progress(epoch, rep):
        print(f"epoch {epoch}: loss {rep.loss[-1]:.4f} train_acc {rep.train_acc[-1]:.3f} "
              f"val_acc {rep.val_acc[-1]:.3f} batch_mg {rep.batch_mg[-1]:.4f}", flush=True)

    params, report = train(sp.train, sp.validation, spec, cfg, progress=progress)
    save_model(out / "model", params)
    (out / "train_report.csv").write_text(report.to_csv())
    _write_json(out / "train_config.json", cfg.to_json())
    if args.plots:
        plots.write_svg(out / "loss.svg", plots.line_chart({"train loss": report.loss}, "Train loss",
                                                           ylabel="loss"))
        plots.write_svg(out / "accuracy.svg", plots.line_chart(
            {"train": report.train_acc, "validation": report.val_acc}, "Train accuracy", ylabel="accuracy"))
    s = report.summary()
    print(f"best epoch {s['best_epoch']} of {s['epochs_run']}, val_acc {s['best_val_acc']:.3f}; "
          f"model {params.content_hash()[:12]} saved to {out / 'model'}")


def cmd_enroll(args) -> None:
    params = load_model(args.model)
    images = [read_image(p) for p in args.images]
    path = _out(args) / args.gallery
    entry = enroll(path, args.subject, images, params, replace=args.replace)
    print(f"enrolled {entry.subject} (dim {entry.embedding.size}, norm {entry.norm:.6f}) in {path}")


def _threshold_from(args):
    if args.threshold is not None:
        try:
            doc = json.loads(Path(args.threshold).read_text())
            return float(doc["alpha"])
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"cannot read threshold file {args.threshold}: {exc}") from exc
    if args.alpha is None:
        raise UsageError("verify needs --alpha or --threshold")
    return args.alpha


def cmd_verify(args) -> None:
    alpha = _threshold_from(args)
    params = load_model(args.model)
    with ad.precision(np.float32 if args.float32 else np.float64):
        res = verify(args.gallery, args.subject, read_image(args.probe), params, alpha)
    line = f"{res.subject}: score {res.score:.6f} alpha {res.alpha:.6f} -> {'accept' if res.accepted else 'reject'}"
    if args.time:
        line += f" ({res.latency_s * 1000:.2f} ms)"
    print(line)


def cmd_match(args) -> None:
    params = load_model(args.model)
    sp = _split_from(args)
    gallery, probes = _match_sides(args, sp)
    records = _score(params, gallery, probes)
    out = _out(args)
    (out / "records.csv").write_text(records_to_csv(records))
    n_deg = sum(r.degenerate for r in records)
    print(f"scored {len(records)} pairs ({len(gallery)} gallery x {len(probes)} probes), "
          f"{n_deg} degenerate")
    if args.time:
        with ad.precision(np.float32 if args.float32 else np.float64):
            lat = _timed_scores(params, gallery, probes)
        _write_json(out / "latency.json", {"pairs": len(lat), "mean_s": float(np.mean(lat)),
                                           "max_s": float(np.max(lat))})
        print(f"latency per pair: mean {np.mean(lat):.4f} s, max {np.max(lat):.4f} s")
        if args.plots:
            plots.write_svg(out / "latency.svg", plots.latency_trace(lat))


def _candidates(text) -> tuple[float, ...]:
    if not text:
        return DEFAULT_CANDIDATES
    try:
        return tuple(float(c) for c in text.split(",") if c)
    except ValueError:
        raise UsageError(f"--candidates must be comma-separated numbers, got {text!r}") from None


def _read_records(path: Path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read records {path}: {exc.strerror}") from exc
    return records_from_csv(text)


def cmd_threshold(args) -> None:
    records = _read_records(args.records)
    out = _out(args)
    if args.alpha_mode == "kmeans":
        tm = kmeans_threshold([r.score for r in records if not r.degenerate])
        _write_json(out / "threshold.json", tm.to_json())
        print(f"kmeans centres n={tm.center_n:.6f} p={tm.center_p:.6f} -> alpha {tm.alpha:.6f}")
        return
    sweep = sweep_thresholds(records, _candidates(args.candidates))
    _write_json(out / "sweep.json", sweep.to_json())
    alphas = list(sweep.reports)
    plots.write_svg(out / "sweep_rate.svg", plots.bar_chart(
        [f"{a:g}" for a in alphas], [sweep.reports[a].correct_rate for a in alphas],
        "Correct rate per threshold", "correct rate"))
    for a, rep in sweep.reports.items():
        print(f"alpha {a:g}: CA {rep.correctly_accepted} WA {rep.wrong_accepted} "
              f"WR {rep.wrong_rejected} CR {rep.correctly_rejected} rate {100 * rep.correct_rate:.2f}%")
    print(f"best candidate {sweep.best_candidate:g}")
    _write_json(out / "threshold.json", {"alpha": sweep.best_candidate})


def cmd_evaluate(args) -> None:
    records = _read_records(args.records)
    if args.alpha_mode == "fixed":
        if args.alpha is None:
            raise UsageError("--alpha-mode fixed needs --alpha")
        alpha = args.alpha
    elif args.alpha_mode == "kmeans":
        pool = _read_records(args.calibration_records) if args.calibration_records else records
        alpha = kmeans_threshold([r.score for r in pool if not r.degenerate]).alpha
    else:
        alpha = sweep_thresholds(records).best_candidate
    report = evaluate(records, alpha, ties=args.ties)
    out = _out(args)
    (out / "report.json").write_text(report_json(report))
    (out / "report.txt").write_text(report.to_text())
    if args.plots:
        plots.write_svg(out / "confusion.svg", plots.confusion_matrix(
            report.correctly_accepted, report.wrong_accepted, report.wrong_rejected,
            report.correctly_rejected))
        plots.write_svg(out / "scores.svg", plots.score_scatter(
            [r.score for r in records], [bool(r.same_identity) for r in records], alpha,
            "Pair scores (green: correct decision)"))
    sys.stdout.write(report.to_text())


PERTURB_DEFAULTS = {"blur": 2.0, "noise": 10.0}


def cmd_perturb(args) -> None:
    params = load_model(args.model)
    samples = load_dataset(args.data)
    sp = split(samples, args.held_out, args.val_fraction)
    gallery, probes = _match_sides(args, sp, samples)
    clean = _score(params, gallery, probes)
    alpha = args.alpha if args.alpha is not None else kmeans_threshold([r.score for r in clean]).alpha
    treatments = [args.perturb] if args.perturb else ["blur", "noise", "rotate"]
    results = {"none": evaluate(clean, alpha)}
    for tag in treatments:
        sigma = args.sigma if args.sigma is not None else PERTURB_DEFAULTS.get(tag, 0.0)
        p = Perturbation(tag, sigma=sigma, angle=args.angle, seed=args.seed)
        images = [perturb(s.image, p) for s in probes]
        results[tag] = evaluate(_score(params, gallery, probes, images), alpha)
    out = _out(args)
    _write_json(out / "perturb.json", {k: v.to_json() for k, v in results.items()})
    if args.plots:
        names = list(results)
        plots.write_svg(out / "perturb_mg.svg", plots.bar_chart(
            names, [results[k].mg for k in names], "MG under perturbation", "MG"))
        plots.write_svg(out / "perturb_auc.svg", plots.bar_chart(
            names, [results[k].auc for k in names], "AUC under perturbation", "AUC"))
    for k, rep in results.items():
        print(f"{k:7s} rate {100 * rep.correct_rate:6.2f}%  AUC {rep.auc:.4f}  MG {rep.mg:.4f}")


def cmd_gradcheck(args) -> int:
    results = gc.run(trials=args.trials, seed=args.seed, eps=args.eps)
    worst = max(r.max_error for r in results.values())
    for name, r in results.items():
        print(f"{name:28s} max_rel_err {r.max_error:.3e}  coords {r.checked}  kinks {r.kinks}")
    print(f"max relative error {worst:.3e} ({'ok' if worst < gc.TOLERANCE else 'FAIL'})")
    return 0 if worst < gc.TOLERANCE else 1


COMMANDS = {name: globals()[f"cmd_{name}"] for name in VERBS}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    print("# config " + json.dumps(_resolved(args), sort_keys=True), flush=True)
    try:
        with _threads():
            code = COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"{PROG} {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except (VeinmatchError, OSError) as exc:
        print(f"{PROG} {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
