"""Command-line entry points.

Subcommands: synth (generate a corpus), pgt (pseudo ground truth for one
pair), train (adversarial training), transfer (apply a trained model),
warp (standalone TPS warp), bench (attention timing).

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure. The FAT_THREADS environment variable caps the BLAS thread count;
it must be honored before numpy loads, so all heavy imports happen inside
the command handlers.
"""

from __future__ import annotations

import argparse
import os
import sys

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _apply_thread_cap():
    cap = os.environ.get("FAT_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fatkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic face corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image extent in pixels")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pgt", help="pseudo ground truth for a source/reference pair")
    p.add_argument("--source", required=True, help="source sample (.ppm; .lm/.pgm siblings)")
    p.add_argument("--ref", required=True, help="reference sample (.ppm)")
    p.add_argument("--mode", choices=("tps", "hist", "blend"), required=True)
    p.add_argument("--spatial-part", default=None, help="also transfer this part's shape (e.g. eyebrows)")
    p.add_argument("--alpha", type=float, default=0.8, help="blend weight for --mode blend")
    p.add_argument("--out", required=True, help="output image (.ppm; sidecar .meta)")

    p = sub.add_parser("train", help="adversarial training on a corpus")
    p.add_argument("--data", required=True, help="corpus directory with manifest.txt")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--spatial", action="store_true", help="enable the predicted spatial warp")
    p.add_argument("--warp-labels", default="eyebrows", help="label set the warp may move")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key = value file overriding the flags")
    p.add_argument("--out", required=True, help="checkpoint path (.fatw; sidecar .cfg)")
    p.add_argument("--log", required=True, help="loss CSV path")

    p = sub.add_parser("transfer", help="apply a trained model to a pair")
    p.add_argument("--model", required=True, help="checkpoint from train")
    p.add_argument("--source", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--highres", default=None, help="full-resolution frame (.ppm)")
    p.add_argument("--box", default=None, help="x,y,w,h crop of the frame matching the source")

    p = sub.add_parser("warp", help="standalone TPS image warp")
    p.add_argument("--image", required=True)
    p.add_argument("--src-pts", required=True, help="FATPTS file of source points")
    p.add_argument("--dst-pts", required=True, help="FATPTS file of target points")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="batched attention vs sequential per-part baseline")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None, help="also write the timings as CSV")

    return parser


# -- command handlers ---------------------------------------------------------


def _cmd_synth(args) -> int:
    from .data import make_corpus

    manifest = make_corpus(args.out, count=args.count, size=args.size, seed=args.seed)
    print(manifest)
    return EXIT_OK


def _cmd_pgt(args) -> int:
    from .data import load_sample
    from .pseudo_gt import blend_pgt, color_pgt, histogram_pgt, spatial_pgt, write_pgt
    from .spatial import parse_active_labels

    source = load_sample(args.source)
    reference = load_sample(args.ref)
    if args.mode == "tps":
        result = color_pgt(source, reference)
        if args.spatial_part:
            for label in parse_active_labels(args.spatial_part):
                result = spatial_pgt(result, source, reference, label)
    elif args.mode == "hist":
        result = histogram_pgt(source, reference)
    else:
        result = blend_pgt(source, reference, alpha=args.alpha)
    write_pgt(args.out, result)
    print(args.out)
    return EXIT_OK


def _load_corpus_pairs(data_dir):
    from .data import load_sample, read_manifest

    manifest = os.path.join(data_dir, "manifest.txt")
    rows = read_manifest(manifest)
    plain, makeup = [], []
    for _, group, image, _, _ in rows:
        sample = load_sample(os.path.join(data_dir, image))
        (plain if group == "plain" else makeup).append(sample)
    return list(zip(plain, makeup))


def _cmd_train(args) -> int:
    from .gan import (
        GeneratorConfig,
        LossWeights,
        config_text,
        fit,
        history_csv,
        init_train_state,
        parse_config_text,
        prepare_pair,
        save_state,
    )
    from .spatial import parse_active_labels

    settings = {
        "size": args.size,
        "base_width": args.width,
        "heads": args.heads,
        "spatial": args.spatial,
        "warp_labels": args.warp_labels,
        "steps": args.steps,
        "lr": args.lr,
        "seed": args.seed,
    }
    if args.config:
        with open(args.config, "r", encoding="ascii") as fh:
            settings.update(parse_config_text(fh.read()))
    labels = parse_active_labels(settings["warp_labels"])
    config = GeneratorConfig(
        size=settings["size"],
        base_width=settings["base_width"],
        heads=settings["heads"],
        spatial=settings["spatial"],
        warp_labels=labels,
    )
    weights = LossWeights(
        adv=settings.get("lambda_adv", 1.0),
        cyc=settings.get("lambda_cyc", 10.0),
        per=settings.get("lambda_per", 0.05),
        make=settings.get("lambda_make", 1.0),
    )
    state = init_train_state(config, seed=settings["seed"])
    couples = _load_corpus_pairs(args.data)
    spatial_labels = labels if settings["spatial"] else ()
    pairs = [prepare_pair(x, y, state.percep, spatial_labels=spatial_labels) for x, y in couples]
    fit(state, pairs, weights, lr=settings["lr"], steps=settings["steps"])
    with open(args.log, "w", encoding="ascii") as fh:
        fh.write(history_csv(state.history))
    save_state(args.out, state)
    with open(args.out + ".cfg", "w", encoding="ascii") as fh:
        fh.write(config_text({
            "size": config.size,
            "base_width": config.base_width,
            "heads": config.heads,
            "spatial": config.spatial,
            "warp_labels": settings["warp_labels"],
        }))
    print(f"{args.out} steps={state.iteration} final_J_G={state.history[-1]['J_G']:.6f}")
    return EXIT_OK


def _cmd_transfer(args) -> int:
    from .data import load_sample, read_ppm, write_ppm
    from .gan import GeneratorConfig, generator_forward, load_generator, parse_config_text
    from .spatial import parse_active_labels

    with open(args.model + ".cfg", "r", encoding="ascii") as fh:
        stored = parse_config_text(fh.read())
    config = GeneratorConfig(
        size=stored["size"],
        base_width=stored["base_width"],
        heads=stored["heads"],
        spatial=stored["spatial"],
        warp_labels=parse_active_labels(stored.get("warp_labels", "eyebrows")),
    )
    gen = load_generator(args.model, config)
    source = load_sample(args.source)
    reference = load_sample(args.ref)
    z = generator_forward(
        source.image, reference.image, source.landmarks, reference.landmarks,
        source.mask, gen, config,
    ).data
    if args.highres:
        if not args.box:
            raise ValueError("--highres requires --box x,y,w,h")
        from .pyramid import crop_and_resize, pyramid_reconstruct

        box = tuple(int(v) for v in args.box.split(","))
        if len(box) != 4:
            raise ValueError("--box expects four integers x,y,w,h")
        frame = read_ppm(args.highres)
        pair = crop_and_resize(frame, box, low_size=config.size)
        z = pyramid_reconstruct(pair, z)
    write_ppm(args.out, z)
    print(args.out)
    return EXIT_OK


def _cmd_warp(args) -> int:
    from .data import read_ppm, write_ppm
    from .tensor import ParameterError
    from .tps import read_points, tps_grid, tps_solve, warp_image

    image = read_ppm(args.image)
    src = read_points(args.src_pts)
    dst = read_points(args.dst_pts)
    if src.shape != dst.shape:
        raise ParameterError(f"point counts differ: {src.shape[0]} vs {dst.shape[0]}")
    # content at the source points should land on the target points, so the
    # sampling transform runs target -> source
    transform = tps_solve(dst, src)
    grid = tps_grid(transform, image.shape[1], image.shape[2])
    write_ppm(args.out, warp_image(image, grid))
    print(args.out)
    return EXIT_OK


def _cmd_bench(args) -> int:
    import time

    # one BLAS thread by default: pool wakeups dominate these small kernels
    # and swamp the comparison; FAT_THREADS (or explicit env) overrides
    cap = os.environ.get("FAT_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)

    import numpy as np

    from .attention import (
        FatParams,
        color_transform,
        estimate_attributes,
        fat_forward,
        flatten_map,
        landmark_embedding,
        static_attention,
        transfer_attributes,
        unflatten_map,
    )
    from .tensor import Tensor

    rng = np.random.default_rng(args.seed)
    d = 4 * args.width
    hb = args.size // 4
    params = FatParams(d=d, heads=args.heads, n_landmarks=30, rng=rng, estimator="random")
    for tensor in params.parameters():
        tensor.requires_grad = False  # timing inference, not graph building
    x_map = Tensor(rng.normal(size=(d, hb, hb)))
    y_map = Tensor(rng.normal(size=(d, hb, hb)))
    le_x = landmark_embedding(hb, hb, rng.uniform(0.2, 0.8, size=(30, 2)))
    le_y = landmark_embedding(hb, hb, rng.uniform(0.2, 0.8, size=(30, 2)))

    def batched_pass():
        return fat_forward(x_map, y_map, le_x, le_y, params)

    def sequential_pass():
        # the pre-attention baseline: one full static-attention pass per face
        # part, attributes transferred part by part and averaged
        x_flat, y_flat = flatten_map(x_map), flatten_map(y_map)
        gamma_ref = flatten_map(estimate_attributes(y_map, params))
        merged = None
        for _ in range(2):  # two parts, handled one after the other
            attn = static_attention(x_flat, y_flat, le_x, le_y)
            moved = transfer_attributes(attn, gamma_ref)
            merged = moved if merged is None else merged + moved
        return unflatten_map(color_transform(x_flat, merged * 0.5), hb, hb)

    try:
        # keep large temporaries inside the heap: repeated mmap/munmap of the
        # attention buffers otherwise dominates both timings with page faults
        import ctypes

        ctypes.CDLL("libc.so.6").mallopt(-3, 1 << 28)  # M_MMAP_THRESHOLD
    except OSError:
        pass

    def measure_interleaved(first, second):
        # alternate the two variants so allocator and cache state stay fair
        for _ in range(10):
            first()
            second()
        totals = [0.0, 0.0]
        for _ in range(args.iters):
            start = time.perf_counter()
            first()
            mid = time.perf_counter()
            second()
            end = time.perf_counter()
            totals[0] += mid - start
            totals[1] += end - mid
        return totals[0] / args.iters * 1e3, totals[1] / args.iters * 1e3

    fat_ms, sequential_ms = measure_interleaved(batched_pass, sequential_pass)
    print(f"fat_ms={fat_ms:.3f}")
    print(f"sequential_ms={sequential_ms:.3f}")
    if args.csv:
        with open(args.csv, "w", encoding="ascii") as fh:
            fh.write("kind,mean_ms\n")
            fh.write(f"fat,{fat_ms:.6f}\n")
            fh.write(f"sequential,{sequential_ms:.6f}\n")
    return EXIT_OK


_HANDLERS = {
    "synth": _cmd_synth,
    "pgt": _cmd_pgt,
    "train": _cmd_train,
    "transfer": _cmd_transfer,
    "warp": _cmd_warp,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except Exception as exc:  # classified lazily so numpy loads after env setup
        from .gan import NonFiniteLossError
        from .tensor import FormatError, ParameterError, ShapeError
        from .tps import DegenerateGeometryError

        if isinstance(exc, (DegenerateGeometryError, NonFiniteLossError)):
            print(f"fatkit {args.command}: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, (FormatError, ShapeError, ParameterError, ValueError, OSError)):
            print(f"fatkit {args.command}: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
