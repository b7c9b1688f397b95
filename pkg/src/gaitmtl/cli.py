"""Command-line entry point: gaitmtl {synth,train-gpr,train-tc,compare,infer,gradcheck,label}."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import csvio, labeler, model, nncore, synthgait, trainer
from .errors import GaitMTLError, InvalidConfig, NumericalError
from .pipeline import WindowConfig, make_input, stack_windows

log = logging.getLogger("gaitmtl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this tool reserves 2 for data errors."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _effective_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "seeds", None):
        try:
            over["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise InvalidConfig(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    if getattr(args, "epochs", None) is not None:
        task = "gpr" if args.command == "train-gpr" else "tc"
        over[task] = {"epochs": args.epochs}
    if getattr(args, "faithful_relu", False):
        over["gpr_output_activation"] = "relu"
    if over:
        cfg = cfgmod.from_dict(over, base=cfg)
    return cfg


def _out_dir(args, cfg: cfgmod.RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def _dataset(cfg: cfgmod.RunConfig) -> synthgait.Dataset:
    return synthgait.generate_dataset(cfg.data.conditions(), cfg.data.dataset_config())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    out = _out_dir(args, cfg)
    trials_dir = out / "trials"
    trials_dir.mkdir(exist_ok=True)
    params = synthgait.GaitModelParams()
    entries = []
    for cond in cfg.data.conditions():
        if args.duration is not None:
            cond = replace(cond, duration=args.duration)
        trial = synthgait.generate_trial(cond, params)
        stem = f"{cond.terrain}_{int(cond.cadence_bpm)}"
        csvio.write_trial(trials_dir / f"{stem}_imu.csv", trial.t, trial.imu)
        csvio.write_fsr(trials_dir / f"{stem}_fsr.csv", trial.t, trial.fsr)
        csvio.write_rows(trials_dir / f"{stem}_events.csv", ("kind", "t"),
                         sorted([("FLP", t) for t in trial.flp_times] + [("FSP", t) for t in trial.fsp_times],
                                key=lambda e: e[1]))
        entries.append({"stem": stem, "terrain": cond.terrain, "cadence_bpm": cond.cadence_bpm,
                        "duration": cond.duration, "seed": cond.seed, "n_samples": trial.n_samples,
                        "sha256": trial.digest()})
    manifest = {"generator_params": params.to_dict(), "trials": entries}
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(entries)} trials to {trials_dir} (manifest {synthgait.manifest_digest(manifest)[:12]})")
    return EXIT_OK


def cmd_train_gpr(args, cfg) -> int:
    out = _out_dir(args, cfg)
    ds = _dataset(cfg)
    tcfg = trainer.TrainConfig.for_task("gpr", cfg.seed, **cfg.train_overrides("gpr"))
    train_set, test_set = trainer.split_gpr(ds.gpr, cfg.seed)
    net = model.build_gpr_model(cfg.seed, cfg.gpr_output_activation)
    net, hist = trainer.train(net, train_set, tcfg, test_set)
    rmse = trainer.evaluate_gpr(net, test_set)
    model.save_weights(net, out / "gpr.weights")
    (out / "gpr_loss.csv").write_text(hist.to_csv())
    _write_json(out / "gpr_metrics.json", {"seed": cfg.seed, "rmse_percent": rmse, "n_train": len(train_set),
                                           "n_test": len(test_set), "overrides": tcfg.overrides()})
    print(f"GPR seed {cfg.seed}: held-out circular RMSE {rmse:.3f}% -> {out / 'gpr.weights'}")
    return EXIT_OK


def cmd_train_tc(args, cfg) -> int:
    loaded = model.load_weights(args.gpr_weights)
    gpr = loaded["gpr"] if isinstance(loaded, dict) else loaded
    if gpr.task != "gpr":
        raise InvalidConfig(f"{args.gpr_weights} does not hold a GPR model")
    out = _out_dir(args, cfg)
    ds = _dataset(cfg)
    tcfg = trainer.TrainConfig.for_task("tc", cfg.seed, **cfg.train_overrides("tc"))
    tc_train, tc_test, chosen = trainer.split_tc(ds.tc, cfg.seed, cfg.cycles_per_terrain)
    tc_model, hist = trainer.train_tc_stage(gpr, tc_train, tcfg, tc_test)
    acc, xent = trainer.evaluate_tc(tc_model, tc_test)
    model.save_weights({"gpr": gpr, "tc": tc_model}, out / "multitask.weights")
    (out / "tc_loss.csv").write_text(hist.to_csv())
    _write_json(out / "tc_metrics.json", {"seed": cfg.seed, "accuracy_percent": acc, "cross_entropy": xent,
                                          "train_cycles": chosen, "n_train": len(tc_train), "n_test": len(tc_test),
                                          "overrides": tcfg.overrides()})
    print(f"TC seed {cfg.seed}: accuracy {acc:.2f}%, cross-entropy {xent:.4f} -> {out / 'multitask.weights'}")
    return EXIT_OK


def cmd_compare(args, cfg) -> int:
    out = _out_dir(args, cfg)
    ds = _dataset(cfg)
    t0 = time.perf_counter()
    report = trainer.run_comparison(ds, cfg.seeds, cfg.train_overrides("gpr"), cfg.train_overrides("tc"),
                                    out_dir=out, cycles_per_terrain=cfg.cycles_per_terrain)
    trainer.emit_report(report, out / "comparison.json", "json")
    trainer.emit_report(report, out / "comparison.txt", "text")
    sys.stdout.write(trainer.report_table(report))
    log.info("comparison finished in %.1f s", time.perf_counter() - t0)
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    loaded = model.load_weights(args.weights)
    bundle = loaded if isinstance(loaded, dict) else {loaded.task: loaded}
    gpr, tc = bundle.get("gpr"), bundle.get("tc")
    if gpr is None and tc is None:
        raise InvalidConfig(f"{args.weights} holds neither a GPR nor a TC model")
    t, imu = csvio.read_trial(args.trial)
    wcfg = WindowConfig(duration_T=args.duration, stride=args.stride, smooth_len=cfg.data.smooth_len)
    windows = stack_windows(imu.T, wcfg)
    X = make_input(windows, wcfg)
    ends = t[np.arange(len(windows)) * wcfg.stride + wcfg.window_len - 1]
    cols = {"t": ends}
    header = ["t", "percent", "x", "y", "terrain", *[f"p_{k}" for k in synthgait.TERRAINS]]
    n = len(ends)
    if gpr is not None:
        xy = gpr.predict(X)
        cols["x"], cols["y"] = xy[:, 0], xy[:, 1]
        ok = (xy[:, 0] != 0) | (xy[:, 1] != 0)
        pct = np.full(n, np.nan)
        pct[ok] = labeler.from_phase_xy(xy[ok, 0], xy[ok, 1])
        cols["percent"] = pct
    if tc is not None:
        probs = tc.predict(X)
        cols["terrain"] = [synthgait.TERRAINS[i] for i in np.argmax(probs, axis=1)]
        for k, name in enumerate(synthgait.TERRAINS):
            cols[f"p_{name}"] = probs[:, k]
    blank = [""] * n
    rows = zip(*(cols.get(h, blank) for h in header))
    out = _out_dir(args, cfg)
    path = csvio.write_rows(out / "inference.csv", header, rows)
    print(f"{n} windows -> {path}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99]))
    task = "gpr" if args.loss == "mse" else "tc"
    net = model.build_reduced_model(cfg.seed, args.blocks, args.length, task)
    x = rng.random((args.batch, 6, args.length, 1))
    if task == "gpr":
        target = rng.uniform(-1, 1, (args.batch, 2))

        def loss_fn(out):
            return nncore.mse_loss(out, target)
    else:
        target = rng.integers(0, model.N_TERRAINS, args.batch)

        def loss_fn(out):
            return nncore.softmax_xent(out, target)

    if args.inject_fault:
        # test hook: corrupt one analytic gradient to prove the check can fail
        conv = net.blocks[0].conv
        original = conv.backward

        def faulty(grad, need_x=True):
            gx = original(grad, need_x)
            conv.weight.grad *= -1.0
            return gx

        conv.backward = faulty
    t0 = time.perf_counter()
    res = nncore.grad_check(net, x, loss_fn)
    elapsed = time.perf_counter() - t0
    ok = res.passed(args.tol)
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max relative error {res.max_rel_error:.3e} "
          f"(tol {args.tol:.0e}) at {res.worst_param}{list(res.worst_index)}; "
          f"{res.n_checked} elements checked, {res.n_kink_skipped} skipped at kinks, {elapsed:.1f} s")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_label(args, cfg) -> int:
    t, fsr = csvio.read_fsr(args.fsr)
    percent, events = labeler.label_stream(t, fsr[:, 0], fsr[:, 1], args.threshold)
    out = _out_dir(args, cfg)
    rows = []
    for ti, p in zip(t, percent):
        if np.isnan(p):
            rows.append((ti, "", "", ""))
        else:
            x, y = labeler.to_phase_xy(p)
            rows.append((ti, p, x, y))
    csvio.write_rows(out / "labels.csv", ("t", "percent", "x", "y"), rows)
    csvio.write_rows(out / "events.csv", ("kind", "t"), events)
    print(f"{len(events)} events, {int(np.sum(~np.isnan(percent)))} labeled samples -> {out / 'labels.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common_flags(suppress: bool = False) -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    common.add_argument("--config", metavar="PATH", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS if suppress else "out", help="output directory (default ./out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return common


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaitmtl", description="Multitask gait phase recognition and terrain classification.",
                parents=[_common_flags()])
    # the subcommand copies only set what was typed after it, so flags before it survive
    common = _common_flags(suppress=True)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write synthetic IMU/FSR trial CSVs and a manifest")
    s.add_argument("--duration", type=float, help="seconds per trial (default: config data.trial_duration)")

    s = sub.add_parser("train-gpr", parents=[common], help="stage 1: train the gait-phase model")
    s.add_argument("--epochs", type=int, help="epochs (default 20; Adam lr 1e-4, batch 128, MSE)")
    s.add_argument("--faithful-relu", action="store_true",
                   help="ReLU on the phase output layer instead of identity (default off)")

    s = sub.add_parser("train-tc", parents=[common], help="stage 2: terrain head on frozen GPR blocks 1-2")
    s.add_argument("--gpr-weights", required=True, metavar="PATH", help="weights from train-gpr")
    s.add_argument("--epochs", type=int, help="epochs (default 10; Adam lr 1e-4, batch 128, cross-entropy)")

    s = sub.add_parser("compare", parents=[common], help="Models 1/2/3 over several seeds")
    s.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")

    s = sub.add_parser("infer", parents=[common], help="per-window phase and terrain for a trial CSV")
    s.add_argument("--weights", required=True, metavar="PATH", help="weights file (GPR, TC or multitask)")
    s.add_argument("--trial", required=True, metavar="CSV", help="trial CSV with header t,lax,lay,laz,avx,avy,avz")
    s.add_argument("--duration", type=float, default=1.5, help="window length in seconds (default 1.5)")
    s.add_argument("--stride", type=int, default=1, help="window stride in samples (default 1)")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the backward pass")
    s.add_argument("--blocks", type=int, default=2, help="conv blocks (default 2)")
    s.add_argument("--length", type=int, default=20, help="input length (default 20)")
    s.add_argument("--batch", type=int, default=4, help="batch size (default 4)")
    s.add_argument("--loss", choices=("mse", "xent"), default="mse", help="loss to check (default mse)")
    s.add_argument("--tol", type=float, default=1e-6, help="max relative error (default 1e-6)")
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    s = sub.add_parser("label", parents=[common], help="gait-percent labels from an FSR CSV")
    s.add_argument("--fsr", required=True, metavar="CSV", help="FSR CSV with header t,front,back")
    s.add_argument("--threshold", type=float, default=labeler.DEFAULT_THRESHOLD,
                   help=f"contact threshold (default {labeler.DEFAULT_THRESHOLD})")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train-gpr": cmd_train_gpr,
    "train-tc": cmd_train_tc,
    "compare": cmd_compare,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "label": cmd_label,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("gaitmtl: error: a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GaitMTLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
