"""``weitop`` command line.

Exit codes: 0 success, 2 bad arguments or inputs, 3 training diverged.
"""
from __future__ import annotations

import argparse
import ast
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .aggregation import FULL_SCALE_TIERS, TOY_TIERS
from .data import BENCHMARK, TRAIN_VIEWS, SynthDataset, benchmark_split, make_synth_dataset
from .io import Checkpoint, FormatError, TokenFile, save_checkpoint, write_grid_csv, write_pgm
from .model import make_config
from .numerics import DomainError
from .ot import absorbed_token_mass
from .pruning import DEFAULT_KAPPA, prune_scores, select_topk
from .retrieval import TABLE_RHOS, evaluate, rho_sweep
from .training import FULL_SCALE_LR, TrainConfig, TrainingDiverged, train
from .validation import check_rho, check_tiers

log = logging.getLogger("weitop")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def default_tiers(clusters: int) -> tuple[int, ...]:
    """Split ``clusters`` in the 24:20:16:4 proportions of the 64-cluster layout."""
    if clusters == sum(FULL_SCALE_TIERS):
        return FULL_SCALE_TIERS
    if clusters == sum(TOY_TIERS):
        return TOY_TIERS
    sizes = [max(1, int(clusters * t / sum(FULL_SCALE_TIERS))) for t in FULL_SCALE_TIERS]
    sizes[0] += clusters - sum(sizes)
    if sizes[0] < 1:
        raise UsageError(f"cannot split {clusters} clusters into 4 tiers; pass --tiers")
    return tuple(sizes)


# --- dataset handling --------------------------------------------------------


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--places", type=int, default=BENCHMARK["num_places"])
    g.add_argument("--views", type=int, default=BENCHMARK["views_per_place"])
    g.add_argument("--noise", type=float, default=BENCHMARK["noise"])
    g.add_argument("--distractor-frac", type=float, default=BENCHMARK["distractor_frac"])
    g.add_argument("--vocab", type=int, default=BENCHMARK["vocab_size"],
                   help="shared texture codebook size (0 = unrestricted)")
    g.add_argument("--image-side", type=int, default=BENCHMARK["image_side"])
    g.add_argument("--data-seed", type=int, default=None,
                   help="dataset seed (defaults to --seed)")


def _dataset_params(args) -> dict:
    return dict(
        num_places=args.places, views_per_place=args.views, noise=args.noise,
        distractor_frac=args.distractor_frac, seed=args.seed if args.data_seed is None else args.data_seed,
        image_side=args.image_side, vocab_size=args.vocab or None,
    )


def _make_dataset(params: dict) -> SynthDataset:
    try:
        return make_synth_dataset(**params)
    except ValueError as e:
        raise UsageError(str(e))


def _eval_dataset(args, ckpt: Checkpoint) -> SynthDataset:
    if args.dataset:
        path = Path(args.dataset)
        if not path.exists():
            raise UsageError(f"dataset not found: {path}")
        return SynthDataset.load(path)
    if "dataset" not in ckpt.extra:
        raise UsageError("checkpoint records no dataset; pass --dataset")
    return make_synth_dataset(**ast.literal_eval(ckpt.extra["dataset"]))


def _split(ds: SynthDataset):
    _, queries, refs = benchmark_split(ds, TRAIN_VIEWS)
    if len(queries) == 0:
        raise UsageError(f"need more than {TRAIN_VIEWS} views per place for held-out queries")
    return queries, refs


def _load_ckpt(path) -> Checkpoint:
    if not path or not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return Checkpoint.load(path)
    except FormatError as e:
        raise UsageError(f"unreadable checkpoint {path}: {e}")


# --- commands ----------------------------------------------------------------


def cmd_make_dataset(args) -> int:
    ds = _make_dataset(_dataset_params(args))
    ds.save(args.out)
    print(f"{len(ds)} images, sha256 {ds.checksum()}")
    return EXIT_OK


def cmd_train(args) -> int:
    tiers = check_tiers(args.tiers, args.clusters) if args.tiers else default_tiers(args.clusters)
    if args.epsilon <= 0 or args.sinkhorn_iters < 1 or args.gamma < 0 or args.temp <= 0:
        raise UsageError("epsilon and temp must be positive, sinkhorn-iters >= 1, gamma >= 0")
    if args.epochs < 1:
        raise UsageError("epochs must be at least 1")
    params = _dataset_params(args)
    ds = _make_dataset(params)
    train_set, queries, refs = benchmark_split(ds, TRAIN_VIEWS)
    heldout = (queries, refs) if len(queries) else None
    model_cfg = make_config(
        image_side=args.image_side, tiers=tiers, epsilon=args.epsilon,
        sinkhorn_iters=args.sinkhorn_iters, ghost_penalty=args.lambda_ghost,
        prune_layer=args.prune_layer,
    )
    cfg = TrainConfig(
        epochs=args.epochs, lr=args.lr, gamma=args.gamma, temperature=args.temp,
        place_repeats=args.place_repeats, seed=args.seed,
        places_per_batch=args.places_per_batch, views_per_place=args.views_per_batch,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(train_set, model_cfg, cfg, heldout=heldout)
    except TrainingDiverged as e:
        write_metrics(out / "metrics.csv", e.trace, len(tiers))
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    extra = {
        "dataset": repr(params),
        "train": repr({k: v for k, v in vars(cfg).items() if k != "ms"}),
        "ms": repr(vars(cfg.ms)),
    }
    digest = save_checkpoint(out / "model.wadc", result.model, extra)
    write_metrics(out / "metrics.csv", result.trace, len(tiers))
    last = result.trace[-1]
    print(f"checkpoint {out / 'model.wadc'} sha256 {digest}")
    print(f"final l_retr {last['l_retr']:.6f} l_distill {last['l_distill']:.6e} "
          f"recall_at_1 {last['recall_at_1']:.4f}")
    return EXIT_OK


def metrics_header(n_tiers: int) -> list[str]:
    return ["epoch", "l_retr", "l_distill"] + [f"w_{t}" for t in range(n_tiers)] + ["recall_at_1"]


def write_metrics(path, trace: list[dict], n_tiers: int) -> None:
    header = metrics_header(n_tiers)
    with open(path, "w", newline="", encoding="ascii") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in trace:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in header[1:]])


def _describe_kwargs(args, n_layers: int):
    if args.no_prune:
        return {}
    rho = check_rho(args.rho)
    if rho == 1.0:
        return {}
    layer = args.prune_layer
    if layer is not None and not 1 <= layer < n_layers:
        raise UsageError(f"--prune-layer must lie in [1, {n_layers - 1}]")
    return dict(rho=rho, kappa=args.kappa, prune_layer=layer)


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    kw = _describe_kwargs(args, ckpt.config.encoder.depth)
    ks = sorted(set(args.topk))
    if not ks or ks[0] < 1:
        raise UsageError("--topk values must be positive")
    queries, refs = _split(_eval_dataset(args, ckpt))
    model = ckpt.build_model()
    rec = evaluate(model.describe(queries.images, **kw), queries.labels,
                   model.describe(refs.images, **kw), refs.labels, ks)
    lines = ["k,recall"] + [f"{k},{rec[k]!r}" for k in ks]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="ascii")
    return EXIT_OK


def cmd_sweep(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    for r in args.rhos:
        check_rho(r)
    depth = ckpt.config.encoder.depth
    layers = args.prune_layers or [ckpt.config.encoder.prune_layer]
    if any(not 1 <= l < depth for l in layers):
        raise UsageError(f"--prune-layers must lie in [1, {depth - 1}]")
    queries, refs = _split(_eval_dataset(args, ckpt))
    model = ckpt.build_model()
    result = rho_sweep(
        model, (queries.images, queries.labels), (refs.images, refs.labels),
        rhos=args.rhos, repeats=args.repeats, prune_layers=layers, kappa=args.kappa,
        random_pruning=args.random, seed=args.seed,
    )
    if args.out:
        result.write_csv(args.out)
    result.write_csv(sys.stdout)
    return EXIT_OK


HEATMAPS = ("absorbed-mass", "prune-scores", "kept-mask")


def heatmap_values(model, image, what: str, rho: float = 1.0, kappa: float = DEFAULT_KAPPA,
                   prune_layer: int | None = None, weighted: bool = True) -> np.ndarray:
    """Per-patch values for one ``(H, W, C)`` image, laid out on the patch grid."""
    cfg = model.cfg.encoder
    layer = cfg.prune_layer if prune_layer is None else prune_layer
    images = torch.as_tensor(np.asarray(image)[None], dtype=torch.float64)
    model.eval()
    with torch.no_grad():
        if what == "absorbed-mass":
            out = model(images, weighting=weighted)
            w = out.tier_weights[out.tau[0]] if weighted else torch.ones(out.plan.shape[-1] - 1,
                                                                        dtype=torch.float64)
            values = absorbed_token_mass(out.plan[0], w)
        else:
            captured = {}

            def select(patch):
                zhat = prune_scores(model.student(patch), patch, kappa)
                captured["zhat"] = zhat
                keep = select_topk(zhat, rho)
                captured["keep"] = keep
                return keep

            model.encoder(images, prune_layer=max(layer, 1), selector=select)
            if what == "prune-scores":
                values = captured["zhat"][0]
            else:
                values = torch.zeros(cfg.n_patches, dtype=torch.float64)
                values[captured["keep"][0]] = 1.0
    return values.numpy().reshape(cfg.grid, cfg.grid)


def _image(args, ckpt: Checkpoint) -> np.ndarray:
    ds = _eval_dataset(args, ckpt)
    if not 0 <= args.image_index < len(ds):
        raise UsageError(f"--image-index must lie in [0, {len(ds) - 1}]")
    return ds.images[args.image_index]


def _out_paths(out: str, *suffixes):
    stem = Path(out)
    if stem.suffix in suffixes:
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    return [stem.with_suffix(s) for s in suffixes]


def cmd_export_heatmap(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    rho = check_rho(args.rho)
    image = _image(args, ckpt)
    model = ckpt.build_model()
    grid = heatmap_values(model, image, args.what, rho, args.kappa, args.prune_layer,
                          weighted=not args.unweighted)
    pgm, csv_path = _out_paths(args.out, ".pgm", ".csv")
    write_pgm(pgm, grid)
    write_grid_csv(csv_path, grid)
    print(f"wrote {pgm} and {csv_path} ({grid.shape[0]}x{grid.shape[1]})")
    return EXIT_OK


def cmd_export_tokens(args) -> int:
    """Patch and CLS tokens after the final encoder norm, as a token file."""
    ckpt = _load_ckpt(args.ckpt)
    image = _image(args, ckpt)
    model = ckpt.build_model()
    with torch.no_grad():
        ts = model.encoder(torch.as_tensor(image[None], dtype=torch.float64)).tokens
    TokenFile(ts.patch[0].numpy(), ts.cls[0].numpy()).save(args.out)
    print(f"wrote {args.out} ({ts.patch.shape[1]} tokens of width {ts.patch.shape[2]})")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    """Global descriptor of a token file, one value per line."""
    ckpt = _load_ckpt(args.ckpt)
    if not Path(args.tokens).exists():
        raise UsageError(f"token file not found: {args.tokens}")
    try:
        tf = TokenFile.load(args.tokens)
    except FormatError as e:
        raise UsageError(str(e))
    if tf.cls is None:
        raise UsageError("token file has no CLS row")
    width = ckpt.config.encoder.width
    if tf.patch.shape[1] != width:
        raise UsageError(f"token width {tf.patch.shape[1]} != model width {width}")
    model = ckpt.build_model()
    patch = torch.as_tensor(tf.patch.astype(np.float64))[None]
    cls = torch.as_tensor(tf.cls.astype(np.float64))[None]
    with torch.no_grad():
        g = model.aggregator(patch, cls).descriptor[0].numpy()
    text = "".join(f"{float(v)!r}\n" for v in g)
    if args.out:
        Path(args.out).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weitop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write a synthetic dataset (.npz)")
    p.add_argument("--seed", type=int, default=0)
    _add_dataset_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train on the synthetic benchmark")
    p.add_argument("--seed", type=int, default=0)
    _add_dataset_flags(p)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--clusters", type=int, default=sum(TOY_TIERS))
    p.add_argument("--tiers", type=str, default=None, help="tier sizes, e.g. 24,20,16,4")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--sinkhorn-iters", type=int, default=100)
    p.add_argument("--lambda-ghost", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--temp", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=FULL_SCALE_LR)
    p.add_argument("--place-repeats", type=int, default=1)
    p.add_argument("--places-per-batch", type=int, default=15)
    p.add_argument("--views-per-batch", type=int, default=4)
    p.add_argument("--prune-layer", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    def eval_flags(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--kappa", type=float, default=DEFAULT_KAPPA)
        p.add_argument("--dataset", default=None, help="dataset .npz (default: regenerate)")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="held-out Recall@K")
    eval_flags(p)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--prune-layer", type=int, default=None)
    p.add_argument("--no-prune", action="store_true", help="bypass the pruning code entirely")
    p.add_argument("--topk", type=_ints, default=[1, 5])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="recall / latency / FLOPs over retention ratios")
    eval_flags(p)
    p.add_argument("--rhos", type=_floats, default=list(TABLE_RHOS))
    p.add_argument("--prune-layers", type=_ints, default=None)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--random", action="store_true", help="uniformly random kept sets")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-heatmap", help="per-patch map as PGM + CSV")
    eval_flags(p)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--what", choices=HEATMAPS, required=True)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--prune-layer", type=int, default=None)
    p.add_argument("--unweighted", action="store_true", help="absorbed mass with w = 1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_heatmap)

    p = sub.add_parser("export-tokens", help="final-layer tokens of one image as a token file")
    eval_flags(p)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_tokens)

    p = sub.add_parser("aggregate", help="descriptor of a token file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, DomainError, ValueError) as e:
        parser.print_usage(sys.stderr)
        print(f"weitop {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
