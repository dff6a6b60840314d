"""Command-line front end: train, ternarize, pack, infer, bench,
validate-rules, compare, inspect.

Exit codes: 0 success, 1 internal error, 2 user error (bad flags, missing
files, malformed config). Commands that write outputs also write a
manifest.json capturing the invocation, seed, and library versions so a run
can be reproduced byte for byte (timestamps aside).

Network configs are one layer per line, e.g.:

    input 1 28 28
    conv 16 5 5 stride=1 pad=2 mode=ternary
    batchnorm
    relu
    maxpool 2
    fc 10 mode=ternary
    loss hinge

`#` starts a comment; kinds: input, conv, fc, batchnorm, relu, maxpool,
loss (hinge|softmax). Weighted layers accept mode=full|ternary|binary.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, data, kernels, packfmt, quantizer, trainer
from .errors import ConfigError, ShapeMismatch, TwnError
from .kernels import _conv_geometry
from .nn import LayerSpec, build_network, network_from_records
from .tensor import Rng, Shape


def parse_network_config(text: str):
    """Config text -> (LayerSpec list, input shape tuple).

    Validates the geometry chain line by line so errors carry line numbers.
    """
    specs = []
    cur = None  # shape flowing through the chain
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head, args = tokens[0].lower(), tokens[1:]
        pos = [a for a in args if "=" not in a]
        kv = {}
        for a in args:
            if "=" in a:
                key, _, val = a.partition("=")
                kv[key.strip()] = val.strip()
        try:
            if head == "input":
                if specs:
                    raise ValueError("input must be the first line")
                dims = tuple(int(p) for p in pos)
                if len(dims) not in (1, 3) or any(d < 1 for d in dims):
                    raise ValueError("input takes `features` or `channels h w`")
                specs.append(LayerSpec("input", {"shape": dims}))
                cur = dims
            elif cur is None:
                raise ValueError("first line must declare `input`")
            elif head == "conv":
                if len(cur) != 3:
                    raise ValueError(f"conv needs a [c,h,w] input, have {cur}")
                out, kh, kw = (int(p) for p in pos)
                stride = int(kv.pop("stride", 1))
                pad = int(kv.pop("pad", 0))
                try:
                    oh, ow = _conv_geometry(cur[1], cur[2], kh, kw, stride, pad)
                except ShapeMismatch as e:
                    raise ValueError(str(e)) from None
                specs.append(
                    LayerSpec(
                        "conv2d",
                        {"out": out, "kh": kh, "kw": kw, "stride": stride, "pad": pad,
                         "mode": _mode(kv.pop("mode", "full"))},
                    )
                )
                cur = (out, oh, ow)
            elif head == "fc":
                (out,) = (int(p) for p in pos)
                specs.append(
                    LayerSpec("fully_connected", {"out": out, "mode": _mode(kv.pop("mode", "full"))})
                )
                cur = (out,)
            elif head == "batchnorm":
                specs.append(LayerSpec("batch_norm", {}))
            elif head == "relu":
                specs.append(LayerSpec("relu", {}))
            elif head == "maxpool":
                if len(cur) != 3:
                    raise ValueError(f"maxpool needs a [c,h,w] input, have {cur}")
                k = int(pos[0]) if pos else 2
                if cur[1] % k or cur[2] % k:
                    raise ValueError(f"window {k} does not divide {cur[1]}x{cur[2]}")
                specs.append(LayerSpec("max_pool2d", {"k": k}))
                cur = (cur[0], cur[1] // k, cur[2] // k)
            elif head == "loss":
                which = pos[0] if pos else "hinge"
                if len(cur) != 1:
                    raise ValueError(f"loss needs flat class scores, have {cur}")
                if which == "hinge":
                    specs.append(
                        LayerSpec("hinge_loss", {"squared": int(kv.pop("squared", 1))})
                    )
                elif which == "softmax":
                    specs.append(LayerSpec("softmax_cross_entropy", {}))
                else:
                    raise ValueError(f"unknown loss {which!r}")
            else:
                raise ValueError(f"unknown layer kind {head!r}")
            if kv:
                raise ValueError(f"unknown options {sorted(kv)}")
        except (ValueError, IndexError) as e:
            raise ConfigError(line_no, str(e)) from None
    if not specs:
        raise ConfigError(0, "config is empty")
    if specs[0].kind != "input":
        raise ConfigError(1, "first line must declare `input`")
    if specs[-1].kind not in ("hinge_loss", "softmax_cross_entropy"):
        raise ConfigError(len(text.splitlines()), "last layer must be a loss")
    return specs, tuple(specs[0].params["shape"])


def _mode(s: str) -> str:
    if s not in ("full", "ternary", "binary"):
        raise ValueError(f"mode must be full|ternary|binary, got {s!r}")
    return s


def _write_manifest(out_path, args_ns, extra=None):
    """manifest.json in out_path if it is a directory, else a sidecar file."""
    manifest = {
        "command": " ".join(sys.argv[1:]) if sys.argv else "",
        "args": {k: v for k, v in vars(args_ns).items() if k != "func"},
        "versions": {"twnkit": __version__, "numpy": np.__version__},
    }
    if extra:
        manifest.update(extra)
    if os.path.isdir(out_path):
        path = os.path.join(out_path, "manifest.json")
    else:
        path = out_path + ".manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, default=str)


def _load_weights_arg(args) -> np.ndarray:
    if args.random is not None:
        n = args.random
        rng = Rng(args.seed)
        if args.dist == "uniform":
            return rng.uniform(n, args.param)
        return rng.normal(n, args.param)
    if args.infile is None:
        raise TwnError("need --in FILE or --random N")
    if not os.path.exists(args.infile):
        raise FileNotFoundError(f"weights file not found: {args.infile}")
    if args.infile.endswith(".npy"):
        return np.load(args.infile).astype(np.float32).ravel()
    return np.fromfile(args.infile, dtype="<f4")


def _load_dataset_arg(args):
    """--data DIR (canonical MNIST), an images/labels IDX pair dir, or `synth`."""
    if args.data == "synth":
        full = data.synth_blobs(
            args.synth_classes, args.synth_per_class, args.synth_dims, args.synth_sep, args.seed
        )
        val_per_class = max(args.synth_per_class // 5, 1)
        val, tr = data.subsample(full, val_per_class, seed=args.seed, return_rest=True)
        return tr, val
    if not os.path.isdir(args.data):
        raise FileNotFoundError(f"data directory not found: {args.data}")
    try:
        train_ds, test_ds = data.load_mnist(args.data)
    except FileNotFoundError:
        # single-pool directory (one images/labels pair): deterministic split
        images = labels = None
        for name in os.listdir(args.data):
            if "images-idx3" in name:
                images = os.path.join(args.data, name)
            elif "labels-idx1" in name:
                labels = os.path.join(args.data, name)
        if images is None or labels is None:
            raise
        pool = data.load_idx_pair(images, labels, split=os.path.basename(args.data.rstrip("/")))
        per_class = min(np.bincount(pool.labels, minlength=pool.classes)) // 2
        train_ds, test_ds = data.subsample(pool, int(per_class), seed=args.seed, return_rest=True)
    if args.per_class:
        train_ds = data.subsample(train_ds, args.per_class, seed=args.seed)
    return train_ds, test_ds


def _solution_json(sol, method) -> dict:
    codes = np.asarray(sol.codes)
    return {
        "method": method,
        "n": int(codes.size),
        "alpha": float(sol.alpha),
        "delta": float(getattr(sol, "delta", float("nan"))),
        "objective": float(sol.objective),
        "zero_fraction": float((codes == 0).mean()),
        "codes_head": codes[:32].tolist(),
    }


def cmd_train(args) -> int:
    with open(args.config) as f:
        specs, _ = parse_network_config(f.read())
    if args.mode:
        for spec in specs:
            if spec.kind in ("conv2d", "fully_connected"):
                spec.params["mode"] = args.mode
    net = build_network(specs)
    train_ds, val_ds = _load_dataset_arg(args)
    cfg = trainer.TrainConfig(
        initial_lr=args.lr,
        lr_decay_epochs=tuple(args.decay_epochs),
        lr_decay_factor=args.decay_factor,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        weight_mode=args.mode or "ternary",
    )
    os.makedirs(args.out, exist_ok=True)
    report = trainer.train(net, train_ds, val_ds, cfg, out_dir=args.out)
    with open(os.path.join(args.out, "report.csv"), "w") as f:
        f.write(report.to_csv())
    with open(os.path.join(args.out, "report.json"), "w") as f:
        f.write(report.to_json())
    _write_manifest(args.out, args, {"dataset": report.dataset_tag})
    print(f"best val acc {report.best_val_acc:.4f} (epoch {report.best_epoch}); "
          f"checkpoint {report.checkpoint_path}")
    return 0


def cmd_ternarize(args) -> int:
    w = _load_weights_arg(args)
    if args.method == "exact":
        sol = quantizer.ternarize_exact(w)
    elif args.method == "heuristic":
        sol = quantizer.ternarize_heuristic(w)
    else:
        if w.size > quantizer.ORACLE_MAX_N:
            raise TwnError(
                f"oracle is limited to n <= {quantizer.ORACLE_MAX_N} (3^n enumeration); got n = {w.size}"
            )
        sol = quantizer.brute_force_oracle(w)
    print(
        f"{args.method}: n={w.size} alpha={sol.alpha:.6f} delta={sol.delta:.6f} "
        f"J={sol.objective:.6f} zeros={float((sol.codes == 0).mean()):.3f}"
    )
    print(json.dumps(_solution_json(sol, args.method)))
    return 0


def cmd_pack(args) -> int:
    w = _load_weights_arg(args)
    group_size = args.group_size or w.size
    if w.size % group_size:
        raise TwnError(f"{w.size} weights do not divide into groups of {group_size}")
    groups = w.size // group_size
    codes = np.empty(w.size, dtype=np.int8)
    alphas = np.empty(groups, dtype=np.float32)
    solver = quantizer.ternarize_exact if args.method == "exact" else quantizer.ternarize_heuristic
    for g in range(groups):
        sol = solver(w[g * group_size : (g + 1) * group_size])
        codes[g * group_size : (g + 1) * group_size] = sol.codes
        alphas[g] = sol.alpha
    packed = packfmt.pack(codes, alphas, group_size)
    rec = packfmt.LayerRecord("fully_connected", {"mode": packfmt.WEIGHT_MODE_TAGS["ternary"]},
                              packed, {"bias": np.zeros(1, np.float32)})
    mf = packfmt.ModelFile([rec])
    packfmt.write_model_file(args.out, mf)
    _write_manifest(args.out, args)
    payload = packed.payload_bytes()
    print(json.dumps({
        "out": args.out,
        "weights": int(w.size),
        "groups": groups,
        "packed_payload_bytes": payload,
        "fp32_bytes": 4 * int(w.size),
        "weight_ratio": 4 * w.size / payload,
    }))
    return 0


def cmd_infer(args) -> int:
    if not os.path.exists(args.model):
        raise FileNotFoundError(f"model file not found: {args.model}")
    mf = packfmt.read_model_file(args.model)
    input_shape = _input_shape_of(mf)
    net = network_from_records(mf, input_shape)
    _, test_ds = _load_dataset_arg(args)
    t0 = time.perf_counter()
    if args.engine == "dense":
        acc = trainer.evaluate(net, test_ds, batch_size=args.batch)
    else:
        acc = _evaluate_mult_free(mf, input_shape, test_ds, args.batch)
    dt = time.perf_counter() - t0
    n = len(test_ds)
    print(json.dumps({
        "model": args.model,
        "engine": args.engine,
        "samples": n,
        "accuracy": acc,
        "seconds": dt,
        "ms_per_sample": 1000.0 * dt / n,
    }))
    return 0


def _input_shape_of(mf) -> tuple:
    first = mf.layers[0]
    if first.kind == "conv2d":
        shape = first.packed.shape.dims if first.packed is not None else first.floats["weight"].shape
        return (shape[1], 28, 28)  # MNIST-sized spatial input
    if first.kind == "fully_connected":
        shape = first.packed.shape.dims if first.packed is not None else first.floats["weight"].shape
        return (shape[1],)
    raise TwnError(f"cannot infer input shape from a leading {first.kind} layer")


def _evaluate_mult_free(mf, input_shape, dataset, batch: int) -> float:
    """Inference through the instrumented add/subtract kernels (packed path)."""
    net = network_from_records(mf, input_shape)
    views = {}
    for layer in net.layers:
        if getattr(layer, "weight_mode", "full") != "full":
            views[layer.name] = kernels.TernaryOperandView(layer.codes.reshape(layer.W.shape), layer.alphas)
    correct = 0
    n = len(dataset)
    for start in range(0, n, batch):
        out = dataset.images[start : start + batch]
        for layer in net.layers:
            if layer.name in views:
                view = views[layer.name]
                if layer.kind == "conv2d":
                    out = kernels.ternary_conv2d(out, view, layer.bias, layer.stride, layer.pad).nd()
                else:
                    flat = out.reshape(out.shape[0], -1)
                    out = kernels.ternary_matmul(flat, view, layer.bias).nd()
            else:
                out = layer.forward(out, "eval")
        correct += int((out.argmax(axis=1) == dataset.labels[start : start + batch]).sum())
    return correct / n


def cmd_bench(args) -> int:
    rng = Rng(args.seed)
    rows = []
    if args.kernel in ("matmul", "all"):
        sizes = {"batch": args.batch, "out": args.m, "in": args.n}
        rows.append(kernels.bench("ternary_matmul", sizes, args.reps, rng, args.zero_fraction))
        rows.append(kernels.bench("reference_matmul", sizes, args.reps, rng))
    if args.kernel in ("conv2d", "all"):
        sizes = {"batch": args.batch, "cin": args.cin, "cout": args.cout, "hw": args.hw, "k": args.k}
        rows.append(kernels.bench("ternary_conv2d", sizes, args.reps, rng, args.zero_fraction))
        rows.append(kernels.bench("reference_conv2d", sizes, args.reps, rng))
    if args.kernel in ("dot", "all"):
        rows.append(kernels.bench("ternary_dot", {"n": args.n}, args.reps, rng, args.zero_fraction))
    csv = kernels.bench_rows_to_csv(rows)
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv)
        _write_manifest(args.out, args)
    print(csv, end="")
    return 0


def cmd_validate_rules(args) -> int:
    report = quantizer.validate_distribution_rule(args.dist, args.param, args.n, Rng(args.seed))
    print(
        f"{args.dist}(param={args.param}, n={args.n}): exact delta = {report.delta_exact:.4f}, "
        f"predicted = {report.delta_predicted:.4f}, heuristic = {report.delta_heuristic:.4f}"
    )
    print(f"objective ratio heuristic/exact = {report.heuristic_ratio:.6f} (>= 1 by optimality)")
    print(json.dumps({
        "dist": report.kind,
        "param": report.param,
        "n": report.n,
        "delta_exact": report.delta_exact,
        "delta_predicted": report.delta_predicted,
        "delta_heuristic": report.delta_heuristic,
        "objective_exact": report.objective_exact,
        "objective_heuristic": report.objective_heuristic,
        "heuristic_ratio": report.heuristic_ratio,
    }))
    return 0


def cmd_compare(args) -> int:
    rows = []
    tags = set()
    for path in args.reports:
        with open(path) as f:
            rep = json.load(f)
        tags.add(rep.get("dataset", ""))
        rows.append(
            {
                "report": path,
                "mode": rep["config"]["weight_mode"],
                "seed": rep["config"]["seed"],
                "best_val_acc": rep["best_val_acc"],
                "final_val_acc": rep["epochs"][-1]["val_acc"] if rep["epochs"] else float("nan"),
            }
        )
    if len(tags) > 1:
        print(f"warning: reports span different datasets: {sorted(tags)}", file=sys.stderr)
    rows.sort(key=lambda r: -r["best_val_acc"])
    width = max(len(r["report"]) for r in rows)
    print(f"{'report':{width}s}  mode     seed  best_acc  final_acc")
    for r in rows:
        print(f"{r['report']:{width}s}  {r['mode']:8s} {r['seed']:4d}  {r['best_val_acc']:.4f}    {r['final_val_acc']:.4f}")
    by_mode = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append(r["best_val_acc"])
    if "ternary" in by_mode and "binary" in by_mode:
        twn = np.mean(by_mode["ternary"])
        bpwn = np.mean(by_mode["binary"])
        if twn < bpwn:
            print(f"warning: mean ternary accuracy {twn:.4f} below binary {bpwn:.4f} "
                  f"(expected ternary >= binary)", file=sys.stderr)
    return 0


def cmd_inspect(args) -> int:
    if not os.path.exists(args.model):
        raise FileNotFoundError(f"model file not found: {args.model}")
    mf = packfmt.read_model_file(args.model)
    print(f"{args.model}: format v{mf.version}, {len(mf.layers)} layers")
    for i, rec in enumerate(mf.layers):
        line = f"  [{i}] {rec.kind}"
        if rec.params:
            line += " " + " ".join(f"{k}={v}" for k, v in sorted(rec.params.items()))
        if rec.packed is not None:
            p = rec.packed
            codes, alphas = packfmt.unpack(p)
            zf = float((codes == 0).mean())
            line += (f" | packed {p.shape} groups={p.groups} x {p.group_size}"
                     f" zeros={zf:.3f} alpha[:4]={np.round(alphas[:4], 5).tolist()}")
        for name, arr in sorted(rec.floats.items()):
            line += f" | {name}{list(np.asarray(arr).shape)}"
        print(line)
    try:
        rep = packfmt.compression_report(mf)
        print(
            f"weights: fp32 {rep.fp32_bytes} B -> packed {rep.packed_bytes} B "
            f"(ratio {rep.ratio:.2f}x vs float32, {rep.fp64_ratio:.2f}x vs float64); "
            f"other floats {rep.float_param_bytes} B; framing {rep.header_bytes} B"
        )
    except ValueError:
        print("no weighted layers; compression ratio undefined")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twnkit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_data_flags(p):
        p.add_argument("--data", required=True,
                       help="MNIST directory (canonical files or one images/labels pair) or `synth`")
        p.add_argument("--per-class", type=int, default=0,
                       help="subsample the training split to N per class")
        p.add_argument("--synth-classes", type=int, default=10)
        p.add_argument("--synth-per-class", type=int, default=60)
        p.add_argument("--synth-dims", type=int, default=64)
        p.add_argument("--synth-sep", type=float, default=3.0)

    p = sub.add_parser("train", help="train a network from a text config")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["ternary", "binary", "full"], default=None,
                   help="override weight mode of every weighted layer")
    add_data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--decay-epochs", type=int, nargs="*", default=[15, 25])
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ternarize", help="solve one weight vector")
    p.add_argument("--in", dest="infile", default=None, help=".npy or raw little-endian f32")
    p.add_argument("--random", type=int, default=None, help="draw N random weights instead")
    p.add_argument("--dist", choices=["normal", "uniform"], default="normal")
    p.add_argument("--param", type=float, default=1.0, help="sigma (normal) or half-width (uniform)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--method", choices=["exact", "heuristic", "oracle"], default="exact")
    p.set_defaults(func=cmd_ternarize)

    p = sub.add_parser("pack", help="ternarize and pack a raw weight blob into a .twn")
    p.add_argument("--in", dest="infile", default=None)
    p.add_argument("--random", type=int, default=None)
    p.add_argument("--dist", choices=["normal", "uniform"], default="normal")
    p.add_argument("--param", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--group-size", type=int, default=0, help="weights per scale group (default: all)")
    p.add_argument("--method", choices=["exact", "heuristic"], default="heuristic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("infer", help="evaluate a .twn model on a dataset")
    p.add_argument("--model", required=True)
    add_data_flags(p)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--engine", choices=["dense", "mult-free"], default="dense")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="time kernels and report op counts")
    p.add_argument("--kernel", choices=["matmul", "conv2d", "dot", "all"], default="all")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--m", type=int, default=64, help="output rows (matmul)")
    p.add_argument("--n", type=int, default=256, help="inner dim (matmul/dot)")
    p.add_argument("--cin", type=int, default=8)
    p.add_argument("--cout", type=int, default=16)
    p.add_argument("--hw", type=int, default=14)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--zero-fraction", type=float, default=0.4)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=None, help="also write the CSV here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate-rules", help="check the a/3 and 0.6*sigma threshold rules")
    p.add_argument("--dist", choices=["uniform", "normal"], required=True)
    p.add_argument("--param", type=float, default=1.0)
    p.add_argument("--n", type=int, default=100000)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_validate_rules)

    p = sub.add_parser("compare", help="tabulate train report JSONs")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="describe a .twn model file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (TwnError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - internal failure boundary
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
