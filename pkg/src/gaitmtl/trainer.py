"""Two-stage training, split protocols, the three-model terrain comparison and reports."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import labeler
from .errors import InvalidConfig, InvalidSplit, NumericalError
from .model import (
    Network,
    attach_tc_head,
    backbone_snapshot,
    build_gpr_model,
    build_mlp_baseline,
    build_tc_scratch,
    freeze_backbone,
    save_weights,
)
from .nncore import Adam, mse_loss, softmax_xent
from .synthgait import TERRAINS, Dataset, WindowSet

log = logging.getLogger(__name__)

# Training hyperparameters per task; these are the defaults for every run.
TABLE_III = {
    "gpr": {"optimizer": "adam", "lr": 1e-4, "loss": "mse", "batch_size": 128, "epochs": 20},
    "tc": {"optimizer": "adam", "lr": 1e-4, "loss": "cross_entropy", "batch_size": 128, "epochs": 10},
}
MODEL_NAMES = ("model1", "model2", "model3")
MODEL_LABELS = {
    "model1": "Model 1 (pretrained GPR blocks 1-2, frozen + TC head)",
    "model2": "Model 2 (blocks 1-2 + TC head, from scratch)",
    "model3": "Model 3 (MLP on flattened input)",
}


@dataclass(frozen=True)
class TrainConfig:
    task: str = "gpr"
    optimizer: str = "adam"
    lr: float = 1e-4
    loss: str = "mse"
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.task not in TABLE_III:
            raise InvalidConfig(f"unknown task {self.task!r}")
        if self.optimizer != "adam":
            raise InvalidConfig("only the adam optimizer is supported")
        if self.loss not in ("mse", "cross_entropy"):
            raise InvalidConfig(f"unknown loss {self.loss!r}")
        if self.batch_size < 2 or self.epochs < 0 or self.lr < 0:
            raise InvalidConfig("batch_size >= 2, epochs >= 0 and lr >= 0 required")

    @classmethod
    def for_task(cls, task: str, seed: int = 0, **overrides) -> "TrainConfig":
        return cls(task=task, seed=seed, **{**TABLE_III[task], **overrides})

    def overrides(self) -> dict:
        """Fields that differ from the task defaults."""
        base = TABLE_III[self.task]
        return {k: getattr(self, k) for k in base if getattr(self, k) != base[k]}


# ------------------------------------------------------------------- splits

def split_gpr(ws: WindowSet, seed: int, train_fraction: float = 0.9) -> tuple[WindowSet, WindowSet]:
    """Seeded shuffle, then a 9:1 train/test partition by window."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    perm = rng.permutation(len(ws))
    n_train = int(round(train_fraction * len(ws)))
    return ws.subset(np.sort(perm[:n_train])), ws.subset(np.sort(perm[n_train:]))


def split_tc(ws: WindowSet, seed: int, cycles_per_terrain: int = 5) -> tuple[WindowSet, WindowSet, dict[str, list[int]]]:
    """Pick `cycles_per_terrain` step cycles per terrain for training; everything else is test.

    Windows are assigned by the cycle of their last sample, so a cycle never
    straddles the split. Windows outside any labeled cycle always go to test.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 12]))
    chosen: dict[str, list[int]] = {}
    train_mask = np.zeros(len(ws), dtype=bool)
    for k, name in enumerate(TERRAINS):
        cycles = np.unique(ws.cycle[(ws.terrain == k) & (ws.cycle >= 0)])
        if cycles.size < cycles_per_terrain:
            raise InvalidSplit(f"terrain {name}: {cycles.size} cycles available, need {cycles_per_terrain}")
        pick = np.sort(rng.choice(cycles, size=cycles_per_terrain, replace=False))
        chosen[name] = [int(c) for c in pick]
        train_mask |= np.isin(ws.cycle, pick)
    return ws.subset(np.flatnonzero(train_mask)), ws.subset(np.flatnonzero(~train_mask)), chosen


# ----------------------------------------------------------------- training

def _targets(ws: WindowSet, task: str) -> np.ndarray:
    return ws.phase if task == "gpr" else ws.terrain


def _loss(cfg: TrainConfig, out: np.ndarray, target: np.ndarray):
    if cfg.loss == "mse":
        return mse_loss(out, target)
    return softmax_xent(out, target)


def _batches(n: int, batch_size: int, perm: np.ndarray) -> list[np.ndarray]:
    bounds = list(range(0, n, batch_size)) + [n]
    batches = [perm[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    # train-mode batch norm needs two samples: fold a lone trailing sample into the previous batch
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _blocks_frozen(model: Network) -> bool:
    return bool(model.blocks) and all(b.bn.frozen and not any(p.trainable for p in b.params()) for b in model.blocks)


def _head_inputs(model: Network, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Frozen blocks are a fixed function of the input, so run them once per window set."""
    parts = [model._run_blocks(X[i:i + batch_size], False, False) for i in range(0, len(X), batch_size)]
    return np.concatenate(parts) if parts else np.empty((0,))


def dataset_loss(model: Network, ws: WindowSet, cfg: TrainConfig, batch_size: int = 512,
                 head_inputs: np.ndarray | None = None) -> float:
    """Mean loss over a window set, eval mode, summed in a fixed order.

    `head_inputs` are precomputed outputs of frozen blocks; only the head runs then.
    """
    total = 0.0
    y = _targets(ws, cfg.task)
    for i in range(0, len(ws), batch_size):
        if head_inputs is None:
            out = model.forward(ws.X[i:i + batch_size], train=False)
        else:
            out = model.head.forward(head_inputs[i:i + batch_size], train=False)
        loss, _ = _loss(cfg, out, y[i:i + batch_size])
        total += loss * out.shape[0]
    return total / max(len(ws), 1)


@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,test_loss"]
        for i, e in enumerate(self.epochs):
            test = repr(self.test_loss[i]) if i < len(self.test_loss) else ""
            rows.append(f"{e},{self.train_loss[i]!r},{test}")
        return "\n".join(rows) + "\n"


def train(model: Network, train_set: WindowSet, cfg: TrainConfig,
          test_set: WindowSet | None = None) -> tuple[Network, History]:
    """Mini-batch Adam with a seeded per-epoch shuffle. Frozen parameters never move."""
    if len(train_set) == 0:
        raise InvalidSplit("empty training set")
    y = _targets(train_set, cfg.task)
    frozen = _blocks_frozen(model)
    X = _head_inputs(model, train_set.X) if frozen else train_set.X
    test_inputs = _head_inputs(model, test_set.X) if frozen and test_set is not None and len(test_set) else None
    net_forward = model.head.forward if frozen else model.forward
    net_backward = model.head.backward if frozen else model.backward
    opt = Adam(model.params(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 13]))
    hist = History()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train_set))
        total = 0.0
        for b, idx in enumerate(_batches(len(train_set), cfg.batch_size, perm)):
            opt.zero_grad()
            out = net_forward(X[idx], train=True)
            loss, grad = _loss(cfg, out, y[idx])
            if not np.isfinite(loss):
                raise NumericalError("non-finite training loss", epoch, b)
            net_backward(grad)
            try:
                opt.step()
            except NumericalError as exc:
                raise NumericalError(str(exc), epoch, b) from None
            total += loss * len(idx)
        hist.epochs.append(epoch)
        hist.train_loss.append(total / len(train_set))
        if test_set is not None and len(test_set):
            hist.test_loss.append(dataset_loss(model, test_set, cfg, head_inputs=test_inputs))
        log.debug("%s epoch %d train %.5f", cfg.task, epoch, hist.train_loss[-1])
    return model, hist


def train_tc_stage(gpr_model: Network, tc_train: WindowSet, cfg: TrainConfig,
                   test_set: WindowSet | None = None, head_seed: int | None = None) -> tuple[Network, History]:
    """Attach a terrain head to blocks 1-2 of a trained GPR model, freeze them, train the head."""
    tc_model = attach_tc_head(gpr_model, cfg.seed if head_seed is None else head_seed)
    freeze_backbone(tc_model)
    return train(tc_model, tc_train, cfg, test_set)


# --------------------------------------------------------------- evaluation

def predict_percent(model: Network, X: np.ndarray) -> np.ndarray:
    out = model.predict(X)
    return labeler.from_phase_xy(out[:, 0], out[:, 1])


def evaluate_gpr(model: Network, test_set: WindowSet) -> float:
    """Circular RMSE (gait %) of recovered phase against the labels.

    Labels are decoded from their phase vectors the same way as predictions, so
    a predictor that reproduces the label vectors scores exactly zero.
    """
    truth = labeler.from_phase_xy(test_set.phase[:, 0], test_set.phase[:, 1])
    return labeler.circular_rmse(predict_percent(model, test_set.X), truth)


def evaluate_tc(model: Network, test_set: WindowSet, batch_size: int = 512) -> tuple[float, float]:
    """(accuracy %, mean cross-entropy) on a terrain window set."""
    correct = 0
    xent = 0.0
    for i in range(0, len(test_set), batch_size):
        logits = model.forward(test_set.X[i:i + batch_size], train=False)
        y = test_set.terrain[i:i + batch_size]
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        loss, _ = softmax_xent(logits, y)
        xent += loss * len(y)
    n = len(test_set)
    return 100.0 * correct / n, xent / n


# --------------------------------------------------------------- comparison

@dataclass
class ComparisonReport:
    provenance: dict
    gpr_runs: list[dict]
    tc_runs: list[dict]

    def summary(self) -> dict:
        out = {}
        rmse = np.array([r["rmse"] for r in self.gpr_runs])
        out["gpr"] = {"rmse_mean": float(rmse.mean()), "rmse_std": float(rmse.std())}
        for name in MODEL_NAMES:
            rows = [r for r in self.tc_runs if r["model"] == name]
            acc = np.array([r["accuracy"] for r in rows])
            xe = np.array([r["cross_entropy"] for r in rows])
            out[name] = {
                "accuracy_mean": float(acc.mean()),
                "accuracy_std": float(acc.std()),
                "cross_entropy_mean": float(xe.mean()),
                "cross_entropy_std": float(xe.std()),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "std_convention": "population std over seeds (ddof=0)",
            "gpr_runs": self.gpr_runs,
            "tc_runs": self.tc_runs,
            "summary": self.summary(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(d["provenance"], d["gpr_runs"], d["tc_runs"])


def run_comparison(
    dataset: Dataset,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    gpr_overrides: dict | None = None,
    tc_overrides: dict | None = None,
    out_dir: str | Path | None = None,
    cycles_per_terrain: int = 5,
    gpr_models: dict | None = None,
) -> ComparisonReport:
    """Per seed: train GPR, then Models 1-3 on the same 15-cycle terrain split.

    `gpr_models` maps seed -> (trained GPR network, history) to skip stage one;
    they must come from the same dataset and seed or the report is meaningless.
    """
    gpr_overrides = dict(gpr_overrides or {})
    tc_overrides = dict(tc_overrides or {})
    out = Path(out_dir) if out_dir is not None else None
    gpr_runs, tc_runs = [], []
    for seed in seeds:
        gcfg = TrainConfig.for_task("gpr", seed, **gpr_overrides)
        tcfg = TrainConfig.for_task("tc", seed, **tc_overrides)
        gpr_train, gpr_test = split_gpr(dataset.gpr, seed)
        if gpr_models is not None and seed in gpr_models:
            gpr_model, ghist = gpr_models[seed]
        else:
            gpr_model, ghist = train(build_gpr_model(seed), gpr_train, gcfg, gpr_test)
        rmse = evaluate_gpr(gpr_model, gpr_test)
        before = backbone_snapshot(gpr_model)
        log.info("seed %d: GPR rmse %.3f%%", seed, rmse)

        tc_train, tc_test, chosen = split_tc(dataset.tc, seed, cycles_per_terrain)
        models = {}
        hists = {}
        models["model1"], hists["model1"] = train_tc_stage(gpr_model, tc_train, tcfg, tc_test)
        models["model2"], hists["model2"] = train(build_tc_scratch(seed), tc_train, tcfg, tc_test)
        models["model3"], hists["model3"] = train(build_mlp_baseline(seed), tc_train, tcfg, tc_test)

        after = backbone_snapshot(gpr_model)
        linf = max(float(np.max(np.abs(before[k] - after[k]))) for k in before)
        rmse_after = evaluate_gpr(gpr_model, gpr_test)
        gpr_runs.append({
            "seed": int(seed),
            "rmse": rmse,
            "rmse_after_tc": rmse_after,
            "backbone_linf_delta": linf,
            "n_train": len(gpr_train),
            "n_test": len(gpr_test),
            "train_loss": ghist.train_loss,
            "test_loss": ghist.test_loss,
        })
        for name in MODEL_NAMES:
            acc, xent = evaluate_tc(models[name], tc_test)
            log.info("seed %d: %s accuracy %.2f%% xent %.4f", seed, name, acc, xent)
            tc_runs.append({
                "model": name,
                "seed": int(seed),
                "accuracy": acc,
                "cross_entropy": xent,
                "n_train": len(tc_train),
                "n_test": len(tc_test),
                "train_cycles": chosen,
                "train_loss": hists[name].train_loss,
                "test_loss": hists[name].test_loss,
            })
        if out is not None:
            sd = out / f"seed{seed}"
            sd.mkdir(parents=True, exist_ok=True)
            save_weights({"gpr": gpr_model, "tc": models["model1"]}, sd / "multitask.weights")
            save_weights(models["model2"], sd / "model2.weights")
            save_weights(models["model3"], sd / "model3.weights")
            (sd / "gpr_loss.csv").write_text(ghist.to_csv())
            for name in MODEL_NAMES:
                (sd / f"{name}_loss.csv").write_text(hists[name].to_csv())

    provenance = {
        "seeds": [int(s) for s in seeds],
        "table_iii": TABLE_III,
        "overrides": {"gpr": gpr_overrides, "tc": tc_overrides},
        "cycles_per_terrain": cycles_per_terrain,
        "dataset": dataset.manifest,
    }
    tc_runs.sort(key=lambda r: (r["model"], r["seed"]))
    return ComparisonReport(provenance, gpr_runs, tc_runs)


# ------------------------------------------------------------------ reports

def report_json(report: ComparisonReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_table(report: ComparisonReport) -> str:
    s = report.summary()
    seeds = report.provenance.get("seeds", [])
    lines = [
        f"Performance summary over seeds {seeds} (mean +/- population std)",
        "",
        f"{'Task':<5} {'Model':<54} {'Accuracy (%)':>18} {'Cross-entropy':>20}",
        "-" * 100,
    ]
    for name in MODEL_NAMES:
        m = s[name]
        acc = f"{m['accuracy_mean']:.2f} +/- {m['accuracy_std']:.2f}"
        xe = f"{m['cross_entropy_mean']:.4f} +/- {m['cross_entropy_std']:.4f}"
        lines.append(f"{'TC':<5} {MODEL_LABELS[name]:<54} {acc:>18} {xe:>20}")
    g = s["gpr"]
    lines += [
        "-" * 100,
        f"{'Task':<5} {'Model':<54} {'RMSE (% gait)':>18} {'Final MSE (test)':>20}",
        "-" * 100,
    ]
    mse = np.mean([r["test_loss"][-1] for r in report.gpr_runs if r["test_loss"]]) if report.gpr_runs else float("nan")
    rm = f"{g['rmse_mean']:.3f} +/- {g['rmse_std']:.3f}"
    lines.append(f"{'GPR':<5} {'9-block backbone + GPR head':<54} {rm:>18} {mse:>20.5f}")
    return "\n".join(lines) + "\n"


def emit_report(report: ComparisonReport, path: str | Path, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        path.write_text(report_json(report))
    elif fmt == "text":
        path.write_text(report_table(report))
    else:
        raise InvalidConfig(f"unknown report format {fmt!r}")
    return path
