"""Command-line pipeline: synthesize, superpixel, train, predict, evaluate.

Heavy modules are imported inside the subcommand handlers so that the
DCN_THREADS cap can be written into the BLAS environment variables before
numpy first loads.
"""

import argparse
import json
import os
import sys
import tempfile

from .errors import DataError, DcnError, NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULT_CHANNELS = "32,64,128,256,512"

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class UsageError(DcnError):
    """Bad flag values or combinations; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _apply_thread_cap():
    raw = os.environ.get("DCN_THREADS")
    if raw is None:
        return
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"DCN_THREADS must be a positive integer, got {raw!r}") from None
    if cap < 1:
        raise UsageError(f"DCN_THREADS must be a positive integer, got {raw!r}")
    for var in _THREAD_VARS:
        os.environ[var] = str(cap)


def _write_text_atomic(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _scene_spec(size, seed):
    """Synthetic-scene parameters at constant object density for any size."""
    from .data import SyntheticSceneSpec

    area = size * size
    return SyntheticSceneSpec(
        height=size,
        width=size,
        buildings=(max(1, area // 2048), max(2, area // 1024)),
        building_size=(min(10, max(4, size // 4)), min(20, max(6, size // 3))),
        building_height=(10.0, 30.0),
        vegetation=(1, max(1, area // 2048)),
        vegetation_radius=(4, 8),
        noise_std=0.01,
        seed=seed,
    )


def _prepare_scene(stack, bands):
    """Derive NDVI, drop bands the pipeline does not consume, rescale."""
    from .data import RasterStack, compute_ndvi, normalize

    if "NDVI" in bands and not stack.has("NDVI"):
        if not (stack.has("NIR") and stack.has("RED")):
            raise DataError("scene lacks the NIR/RED bands needed to derive NDVI")
        stack = compute_ndvi(stack)
    keep = set(bands) | {"MASK"}
    subset = RasterStack(
        width=stack.width,
        height=stack.height,
        gsd=stack.gsd,
        bands=tuple(band for band in stack.bands if band.role in keep),
    )
    return normalize(subset)[0]


def _trainable(stack, bands):
    if not stack.has("MASK"):
        return False
    for role in bands:
        if stack.has(role):
            continue
        if role == "NDVI" and stack.has("NIR") and stack.has("RED"):
            continue
        return False
    return True


def _mask_band(path, flag):
    import numpy as np

    from .data import read_bmsr

    stack = read_bmsr(path)
    if not stack.has("MASK"):
        raise DataError(f"{flag} {path} has no MASK band (present: {stack.roles})")
    return stack.band("MASK").astype(np.int64)


def _segment(tile_data, k, m):
    from .superpixel import SlicParams, slic_segment, zscore_features

    return slic_segment(zscore_features(tile_data), SlicParams(k_desired=k, m=m))


def _positive(value, flag):
    if value < 1:
        raise UsageError(f"{flag} must be >= 1, got {value}")
    return value


def cmd_synth(args):
    from .data import Band, RasterStack, synth_scene, write_bmsr

    _positive(args.count, "--count")
    if args.size < 32:
        raise UsageError(f"--size must be >= 32 to fit the object palette, got {args.size}")
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        scene = synth_scene(_scene_spec(args.size, args.seed + i))
        write_bmsr(scene, os.path.join(args.out, f"scene_{i:03d}.bmsr"))
        mask = RasterStack(
            width=scene.width,
            height=scene.height,
            gsd=scene.gsd,
            bands=(Band("MASK", scene.band("MASK")),),
        )
        write_bmsr(mask, os.path.join(args.out, f"mask_{i:03d}.bmsr"))
    print(f"wrote {args.count} scene/mask pairs to {args.out}")
    return EXIT_OK


def cmd_slic(args):
    import numpy as np

    from .data import Band, RasterStack, compute_ndvi, read_bmsr, write_bmsr

    _positive(args.k, "--k")
    if args.compactness <= 0:
        raise UsageError(f"--compactness must be positive, got {args.compactness}")
    stack = read_bmsr(args.input)
    if stack.has("NIR") and stack.has("RED") and not stack.has("NDVI"):
        stack = compute_ndvi(stack)
    roles = tuple(r for r in stack.roles if r not in ("MASK", "LABELS"))
    if not roles:
        raise DataError(f"--input {args.input} has no feature bands")
    spmap = _segment(stack.select(roles), args.k, args.compactness)
    labels = RasterStack(
        width=stack.width,
        height=stack.height,
        gsd=stack.gsd,
        bands=(Band("LABELS", spmap.labels.astype(np.float32)),),
    )
    write_bmsr(labels, args.out)
    print(f"{spmap.n_segments} superpixels -> {args.out}")
    return EXIT_OK


def _parse_channels(text):
    try:
        channels = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise UsageError(f"--channels must be comma-separated integers, got {text!r}") from None
    if len(channels) != 5 or min(channels) < 1:
        raise UsageError(f"--channels needs five positive widths, got {text!r}")
    return channels


def cmd_train(args):
    from dataclasses import replace

    from .data import read_bmsr, tile
    from .model import DcnConfig, build, save_checkpoint
    from .train import TrainConfig, report_json, train

    channels = _parse_channels(args.channels)
    if args.window < 32 or args.window % 32:
        raise UsageError(f"--window must be a positive multiple of 32, got {args.window}")
    _positive(args.stride, "--stride")
    _positive(args.epochs, "--epochs")
    _positive(args.batch, "--batch")
    _positive(args.dim, "--dim")
    if not 0.0 <= args.dropout < 1.0:
        raise UsageError(f"--dropout must lie in [0, 1), got {args.dropout}")
    slic_k = args.slic_k if args.slic_k is not None else (args.window * args.window) // 64
    _positive(slic_k, "--slic-k")
    if args.slic_m <= 0:
        raise UsageError(f"--slic-m must be positive, got {args.slic_m}")

    config = DcnConfig(
        block_channels=channels,
        embedding_dim=args.dim,
        dropout_rate=args.dropout,
        tile_size=args.window,
        seed=args.seed,
    )
    if not os.path.isdir(args.data):
        raise DataError(f"--data {args.data} is not a directory")
    records = []
    for name in sorted(os.listdir(args.data)):
        if not name.endswith(".bmsr"):
            continue
        path = os.path.join(args.data, name)
        stack = read_bmsr(path)
        if not _trainable(stack, config.input_bands):
            continue
        try:
            scene = _prepare_scene(stack, config.input_bands)
            tiled = tile(scene, window=args.window, stride=args.stride)
        except DataError as err:
            raise DataError(f"--data {path}: {err}") from err
        for record in tiled.tiles:
            spmap = _segment(
                record.stack.select(config.input_bands), slic_k, args.slic_m
            )
            records.append(replace(record, spmap=spmap))
    if not records:
        raise DataError(
            f"--data {args.data} holds no scenes with the "
            f"{'/'.join(config.input_bands)} + MASK bands"
        )

    model = build(config)
    history, report = train(
        model,
        records,
        [],
        TrainConfig(batch_size=args.batch, epochs=args.epochs, seed=args.seed),
    )
    save_checkpoint(model, args.out)
    if args.history:
        _write_text_atomic(args.history, report_json(history) + "\n")
    print(f"trained {len(records)} tiles for {report.ne} epochs -> {args.out}")
    print(
        f"final_loss={history.loss[-1]:.6f} ne={report.ne} "
        f"tt_seconds={report.tt_seconds:.3f} cc_minutes={report.cc_minutes:.3f}"
    )
    return EXIT_OK


def cmd_predict(args):
    from dataclasses import replace

    import numpy as np

    from .autodiff import Tensor
    from .data import Band, RasterStack, read_bmsr, stitch, tile, write_bmsr
    from .model import forward, load_checkpoint
    from .train import confusion, error_map, iou, overall_accuracy, write_ppm

    if args.errmap and not args.truth:
        raise UsageError("--errmap requires --truth to compare against")
    model = load_checkpoint(args.model)
    window = model.config.tile_size
    slic_k = args.slic_k if args.slic_k is not None else (window * window) // 64
    _positive(slic_k, "--slic-k")
    if args.slic_m <= 0:
        raise UsageError(f"--slic-m must be positive, got {args.slic_m}")

    scene = read_bmsr(args.input)
    try:
        prepared = _prepare_scene(scene, model.config.input_bands)
        tiled = tile(prepared, window=window, stride=window)
    except DataError as err:
        raise DataError(f"--input {args.input}: {err}") from err

    out_tiles = []
    for record in tiled.tiles:
        data = record.stack.select(model.config.input_bands)
        spmap = _segment(data, slic_k, args.slic_m)
        _, raster = forward(model, Tensor(data.astype(np.float32)), spmap, "infer")
        mask_stack = RasterStack(
            width=window,
            height=window,
            gsd=prepared.gsd,
            bands=(Band("MASK", raster.astype(np.float32)),),
        )
        out_tiles.append(replace(record, stack=mask_stack, spmap=None))
    merged = stitch(replace(tiled, tiles=tuple(out_tiles)))
    write_bmsr(merged, args.out)
    print(f"prediction -> {args.out}")

    if args.truth:
        pred = merged.band("MASK").astype(np.int64)
        truth = _mask_band(args.truth, "--truth")
        if truth.shape != pred.shape:
            raise DataError(
                f"--truth {args.truth} shape {truth.shape} does not match "
                f"prediction shape {pred.shape}"
            )
        counts = confusion(pred, truth)
        print(f"oa={overall_accuracy(counts):.6f} iou={iou(counts):.6f}")
        if args.errmap:
            write_ppm(error_map(pred, truth), args.errmap)
            print(f"error map -> {args.errmap}")
    return EXIT_OK


def cmd_eval(args):
    from .train import confusion, iou, overall_accuracy

    pred = _mask_band(args.pred, "--pred")
    truth = _mask_band(args.truth, "--truth")
    if pred.shape != truth.shape:
        raise DataError(
            f"--pred {args.pred} shape {pred.shape} does not match "
            f"--truth {args.truth} shape {truth.shape}"
        )
    counts = confusion(pred, truth)
    doc = {
        "oa": overall_accuracy(counts),
        "iou": iou(counts),
        "tp": counts.tp,
        "fp": counts.fp,
        "fn": counts.fn,
        "tn": counts.tn,
    }
    _write_text_atomic(args.json, json.dumps(doc, indent=2) + "\n")
    print(f"oa={doc['oa']:.6f} iou={doc['iou']:.6f}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="dcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic scene + mask raster pairs")
    p.add_argument("--seed", type=int, default=0, help="base seed; scene i uses seed+i")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--size", type=int, required=True, help="square scene side in pixels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("slic", help="superpixel a raster into a LABELS map")
    p.add_argument("--input", required=True, help="source .bmsr raster")
    p.add_argument("--k", type=int, required=True, help="desired superpixel count")
    p.add_argument("--compactness", type=float, default=10.0, help="SLIC m weight")
    p.add_argument("--out", required=True, help="output LABELS .bmsr")
    p.set_defaults(func=cmd_slic)

    p = sub.add_parser("train", help="train a model on a directory of scenes")
    p.add_argument("--data", required=True, help="directory of .bmsr scenes with MASK bands")
    p.add_argument("--epochs", type=int, default=250, help="training epochs")
    p.add_argument("--batch", type=int, default=64, help="tiles per optimizer step")
    p.add_argument("--seed", type=int, default=0, help="weights + shuffling seed")
    p.add_argument("--window", type=int, default=128, help="tile side, multiple of 32")
    p.add_argument("--stride", type=int, default=128, help="tiling stride")
    p.add_argument("--channels", default=DEFAULT_CHANNELS, help="five block widths")
    p.add_argument("--dim", type=int, default=16, help="embedding dimensionality")
    p.add_argument("--dropout", type=float, default=0.5, help="dropout rate in [0, 1)")
    p.add_argument("--slic-k", type=int, default=None, help="superpixels per tile")
    p.add_argument("--slic-m", type=float, default=2.0, help="SLIC compactness")
    p.add_argument("--out", required=True, help="output checkpoint .dcnw")
    p.add_argument("--history", default=None, help="optional loss-history JSON path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="tile, infer, and stitch a building mask")
    p.add_argument("--model", required=True, help="checkpoint .dcnw")
    p.add_argument("--input", required=True, help="scene .bmsr")
    p.add_argument("--out", required=True, help="output MASK .bmsr")
    p.add_argument("--truth", default=None, help="optional truth .bmsr with MASK band")
    p.add_argument("--errmap", default=None, help="optional error-map .ppm (needs --truth)")
    p.add_argument("--slic-k", type=int, default=None, help="superpixels per tile")
    p.add_argument("--slic-m", type=float, default=2.0, help="SLIC compactness")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="compare predicted and truth masks")
    p.add_argument("--pred", required=True, help="predicted MASK .bmsr")
    p.add_argument("--truth", required=True, help="truth MASK .bmsr")
    p.add_argument("--json", required=True, help="output metrics JSON")
    p.set_defaults(func=cmd_eval)
    return parser


def run(argv):
    """Dispatch ``argv`` and translate failures into the exit-code contract."""
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE


def main():
    return run(sys.argv[1:])
