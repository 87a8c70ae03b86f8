"""Command-line front end.

Commands: gen-data, train, eval, analyze, encode, decode, verify.
All artifacts are files; every command is deterministic given its flags
(seeds included). Diagnostics go to stderr, data to files or stdout.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _set_thread_env(threads: int) -> None:
    """Cap BLAS worker pools; must happen before numpy is first imported."""
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, str(threads))


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _merge_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser, argv) -> None:
    """Apply key=value pairs from --config for flags not given on the command line."""
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        parser.error(f"config file {path} does not exist")
    actions = list(parser._actions)
    sub_parser = parser._subcommands.get(args.command)
    if sub_parser is not None:
        actions += sub_parser._actions
    defaults = {a.dest: a.default for a in actions}
    explicit = {
        a.dest for a in actions if any(opt in argv for opt in a.option_strings)
    }
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            parser.error(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        dest = key.strip().replace("-", "_")
        if dest not in defaults or dest == "config":
            parser.error(f"{path}:{lineno}: unknown key {key.strip()!r}")
        if dest in explicit:
            continue  # explicit flags take precedence
        current = defaults[dest]
        caster = type(current) if current is not None and not isinstance(current, bool) else str
        if isinstance(current, bool):
            setattr(args, dest, raw.strip().lower() in ("1", "true", "yes"))
        else:
            try:
                setattr(args, dest, caster(raw.strip()))
            except ValueError:
                parser.error(f"{path}:{lineno}: bad value for {key.strip()!r}: {raw.strip()!r}")


def _model_spec(args):
    from csilab.models import ModelSpec

    return ModelSpec(architecture=args.arch, cr_den=args.cr)


def _profile(args):
    from csilab.channel import SyntheticProfile

    return SyntheticProfile(
        clusters_min=args.clusters_min,
        clusters_max=args.clusters,
        delay_span=args.delay_span,
        delay_spread=args.spread,
        angle_spread=args.angle_spread,
        decay=args.decay,
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from csilab import channel

    profile = _profile(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits, info, stats = channel.build_splits(profile, args.train, args.val, args.test)
    meta = channel.profile_meta(profile)
    for name, x in splits.items():
        channel.dataset_write(out / name, x, info, meta)
    _err(f"wrote {args.train}/{args.val}/{args.test} samples to {out}/")
    _err(f"clip fraction {stats.clip_fraction:.6f}")
    _err(f"delay-domain energy retained {stats.energy_retained:.4f}")
    _err(f"mean peak-cell energy share {stats.peak_cell_energy:.4f}")
    return 0


def _load_split(data_dir, name):
    from csilab.channel import dataset_read

    path = Path(data_dir) / name
    if not path.with_suffix(".csib").exists():
        raise FileNotFoundError(f"no dataset split {path}.csib; run gen-data first")
    return dataset_read(path)


def cmd_train(args) -> int:
    import numpy as np

    from csilab.models import ModelGraph, save_weights
    from csilab.training import EVAL_HEADER, TrainConfig, evaluate, train

    spec = _model_spec(args)
    train_x, info, _ = _load_split(args.data, "train")
    val_x, val_info, _ = _load_split(args.data, "val")
    if val_info != info:
        _err("warning: train and val splits carry different normalization")
    if train_x.shape[2] != spec.nc_prime or train_x.shape[3] != spec.nt:
        _err(f"dataset {train_x.shape[2]}x{train_x.shape[3]} does not match model "
             f"{spec.nc_prime}x{spec.nt}")
        return 1
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        val_every=args.val_every,
        record_timing=args.timing,
    )
    model = ModelGraph(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, train_x, val_x, info, cfg, log=_err)
    weights_final = model.store.clone_values()
    if args.best and result.best_weights is not None:
        model.store.load_values(result.best_weights)
        _err(f"kept best-validation weights from epoch {result.best_epoch} "
             f"({result.best_val_nmse_db:.2f} dB)")
    stem = f"{spec.architecture}_cr{spec.cr_den}"
    save_weights(model, out / f"{stem}.csiw")
    (out / f"{stem}_history.csv").write_text(result.history_csv(), encoding="utf-8")
    try:
        test_x, _, _ = _load_split(args.data, "test")
    except FileNotFoundError:
        test_x = None
    print(EVAL_HEADER)
    ev = evaluate(model, np.asarray(test_x if test_x is not None else val_x), info, cfg.batch_size)
    print(ev.table_row(spec.architecture, spec.cr_den))
    model.store.load_values(weights_final)
    return 0


def cmd_eval(args) -> int:
    from csilab.models import load_weights
    from csilab.training import EVAL_HEADER, evaluate

    model = load_weights(args.weights)
    test_x, info, _ = _load_split(args.data, args.split)
    ev = evaluate(model, test_x, info, batch=args.batch)
    print(EVAL_HEADER)
    print(ev.table_row(model.spec.architecture, model.spec.cr_den))
    return 0


def cmd_analyze(args) -> int:
    from csilab.complexity import AccountingMode, analyze
    from csilab.models import ModelGraph

    mode = AccountingMode.paper_table() if args.mode == "paper-table" else AccountingMode()
    graph = ModelGraph(_model_spec(args), seed=0)
    report = analyze(graph, mode, scope=args.scope)
    if args.csv:
        print(report.as_csv(), end="")
    else:
        print(report.as_text())
    return 0


def cmd_encode(args) -> int:
    from csilab.models import load_weights
    from csilab.tensor import Tensor4, tensor_read, tensor_write

    model = load_weights(args.weights)
    x = tensor_read(args.input).data
    code = model.encode(x)
    tensor_write(args.out, Tensor4(code))
    _err(f"encoded {x.shape[0]} samples -> codewords {tuple(code.shape)}")
    return 0


def cmd_decode(args) -> int:
    from csilab.channel import NormalizationInfo, dataset_read, denormalize, nmse, rho
    from csilab.models import load_weights
    from csilab.tensor import Tensor4, tensor_read, tensor_write

    model = load_weights(args.weights)
    code = tensor_read(args.input).data
    x_hat = model.decode(code)
    tensor_write(args.out, Tensor4(x_hat))
    _err(f"decoded {code.shape[0]} codewords -> {tuple(x_hat.shape)}")
    if args.truth:
        x, info, _ = dataset_read(args.truth) if Path(args.truth).with_suffix(".meta").exists() else (
            tensor_read(args.truth).data,
            NormalizationInfo(scale=1.0, offset=0.0),
            {},
        )
        h, h_hat = denormalize(x, info), denormalize(x_hat, info)
        print(f"NMSE {nmse(h, h_hat):.2f} dB  rho {rho(h, h_hat):.4f}")
    return 0


def cmd_verify(args) -> int:
    import numpy as np

    checks: list[tuple[str, bool, str]] = []

    def check(name, ok, detail=""):
        checks.append((name, bool(ok), detail))
        _err(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")

    from csilab import channel
    from csilab.complexity import AccountingMode, analyze, verify_flops_against_execution
    from csilab.models import CONVCSINET, SHUFFLECSINET, ModelGraph, ModelSpec

    # complexity table oracle
    expect = {
        (CONVCSINET, 16): 58_515_456,
        (CONVCSINET, 32): 58_220_544,
        (SHUFFLECSINET, 16): 11_845_632,
        (SHUFFLECSINET, 32): 11_550_720,
    }
    pt = AccountingMode.paper_table()
    for (arch, cr), flops in expect.items():
        rep = analyze(ModelGraph(ModelSpec(architecture=arch, cr_den=cr), seed=0), pt, "encoder")
        check(f"flops-table {arch} 1/{cr}", rep.total_flops == flops,
              f"{rep.total_flops:,} vs {flops:,}")

    # MAC instrumentation oracle
    for arch in (CONVCSINET, SHUFFLECSINET):
        g = ModelGraph(ModelSpec(architecture=arch, cr_den=16), seed=0)
        v = verify_flops_against_execution(g, np.zeros((2, 2, 32, 32), dtype=np.float32))
        detail = "" if v.ok else f"first mismatch {v.discrepancies[0].layer}"
        check(f"mac-count {arch}", v.ok, detail)

    # pipeline consistency
    prof = channel.SyntheticProfile(seed=3)
    h = channel.generate_batch(prof, 4)
    info = channel.fit_normalization(h)
    x0, _ = channel.normalize(h[0], info)
    full = channel.dft_transform(channel.inverse_dft(channel.pad_delay(h[0])))
    x1, _ = channel.normalize(channel.truncate_delay(full, h.shape[1]), info)
    check("pipeline round trip", np.abs(x1 - x0).max() < 1e-5)

    if args.gradcheck:
        from csilab.autodiff import grad_check

        g = ModelGraph(ModelSpec(architecture=args.arch, cr_den=16), seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.random((2, 2, 32, 32))
        bindings = {"x": x, "target": x}
        names = [n for n in g.store.trainable_names()]
        probe = names if not args.quick else names[:: max(1, len(names) // 8)]
        worst = 0.0
        for name in probe:
            err = grad_check(g.trainer, bindings, name, probe_count=8, rng=rng)
            worst = max(worst, err)
        check(f"gradcheck {args.arch}", worst < 1e-5, f"max rel err {worst:.2e}")

    failed = [name for name, ok, _ in checks if not ok]
    print(f"verify: {len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--arch", choices=["convcsinet", "shufflecsinet"], default="convcsinet")
    p.add_argument("--cr", type=int, choices=[16, 32], default=16,
                   help="compression ratio denominator (1/16 or 1/32)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csilab",
        description="CSI feedback autoencoder laboratory: data, training, analysis, codec.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS worker cap (default 1 for reproducibility)")
    parser.add_argument("--config", help="optional key=value config file; flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic dataset splits")
    p.add_argument("--train", type=int, default=5000)
    p.add_argument("--val", type=int, default=1000)
    p.add_argument("--test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clusters", type=int, default=5, help="maximum clusters per sample")
    p.add_argument("--clusters-min", type=int, default=3)
    p.add_argument("--spread", type=float, default=4.0, help="delay spread of each cluster")
    p.add_argument("--angle-spread", type=float, default=4.0)
    p.add_argument("--delay-span", type=float, default=10.0)
    p.add_argument("--decay", type=float, default=0.0)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(p)
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="runs")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--val-every", type=int, default=1)
    p.add_argument("--best", action="store_true", default=True,
                   help="save best-validation weights (default)")
    p.add_argument("--no-best", dest="best", action="store_false",
                   help="save final weights instead of the best-validation checkpoint")
    p.add_argument("--timing", action="store_true", help="record wall time in the history CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved weights on a dataset split")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="test")
    p.add_argument("--batch", type=int, default=200)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="parameter/FLOP complexity report")
    _add_common(p)
    p.add_argument("--mode", choices=["standard", "paper-table"], default="standard")
    p.add_argument("--scope", choices=["encoder", "decoder", "full"], default="encoder")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of the text table")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("encode", help="compress CSI samples to codewords")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="CSIB tensor of shape (n, 2, 32, 32)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct CSI from codewords")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="CSIB codeword tensor")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="dataset path or CSIB tensor for NMSE/rho reporting")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("verify", help="run the built-in oracles")
    p.add_argument("--quick", action="store_true", help="subsample the gradient checks")
    p.add_argument("--gradcheck", action="store_true", help="include finite-difference checks")
    p.add_argument("--arch", choices=["convcsinet", "shufflecsinet"], default="convcsinet")
    p.set_defaults(func=cmd_verify)

    parser._subcommands = dict(sub.choices)
    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_thread_env(args.threads)
    _merge_config_file(args, parser, argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        _err(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
