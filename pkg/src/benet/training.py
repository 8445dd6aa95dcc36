"""Training loop, ablation arms, checkpoints and the ablation matrix."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import metrics as M
from .detector import DetectorState, batch_bias_statistic, calibrate_threshold, decide
from .errors import CheckpointError, ConfigError, DivergenceError, InputError, NumericalError
from .losses import LossConfig, total_loss
from .model import BENet, ModelConfig
from .synth import SplitData, augment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    feed: str
    objective: str
    detector: bool
    label: str


# one entry per ablation row
ARMS: dict[str, Arm] = {
    "no_ae": Arm("raw", "ce", False, "w/o AE"),
    "ae_no_bias": Arm("recon", "ce", False, "AE w/o Bias"),
    "ae": Arm("bias", "ce", False, "AE"),
    "ae_lsa": Arm("bias_lsa", "ce", False, "AE+LSA"),
    "ae_lsa_rl": Arm("bias_lsa", "rl", False, "AE+LSA+RL"),
    "ae_lsa_be": Arm("bias_lsa", "be", False, "AE+LSA+BE"),
    "ae_lsa_cd": Arm("bias_lsa", "ce", True, "AE+LSA+CD"),
    "full": Arm("bias_lsa", "be", True, "Full BENet"),
}


def get_arm(name: str) -> Arm:
    try:
        return ARMS[name]
    except KeyError:
        raise ConfigError(f"unknown arm {name!r}; expected one of {tuple(ARMS)}") from None


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 30
    arm: str = "full"
    seed: int = 0
    family: Optional[str] = None  # restrict training/validation fakes to one family
    augment: bool = True
    calibrate_on: str = "all"  # or "real"
    eval_batch_size: int = 128

    def __post_init__(self):
        get_arm(self.arm)
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError(f"train.lr must be nonnegative, got {self.lr}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"train.weight_decay must be nonnegative, got {self.weight_decay}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be nonnegative, got {self.epochs}")
        if self.calibrate_on not in ("all", "real"):
            raise ConfigError(f"train.calibrate_on must be 'all' or 'real', got {self.calibrate_on!r}")


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainResult:
    model: BENet
    detector: DetectorState
    arm: str
    seed: int
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    model_config: Optional[ModelConfig] = None
    loss_config: Optional[LossConfig] = None
    train_config: Optional[TrainConfig] = None


def _tensor(data: SplitData, idx=None, dtype=torch.float32):
    imgs = data.images if idx is None else data.images[idx]
    labels = data.labels if idx is None else data.labels[idx]
    return torch.from_numpy(np.ascontiguousarray(imgs)).to(dtype), torch.from_numpy(labels)


@torch.no_grad()
def collect(model: BENet, data: SplitData, feed: str, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Classifier probabilities and bias statistics for every sample, in order."""
    model.eval()
    dtype = next(model.parameters()).dtype
    probs, stats = [], []
    for start in range(0, len(data), batch_size):
        x, _ = _tensor(data, slice(start, start + batch_size), dtype)
        b = model(x, feed=feed)
        probs.append(b.prob.double().numpy())
        if b.bias is None:
            stats.append(np.zeros(x.shape[0]))
        else:
            stats.append(batch_bias_statistic(b.bias).double().numpy())
    if not probs:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(probs), np.concatenate(stats)


@torch.no_grad()
def mean_loss(model, data: SplitData, arm: Arm, loss_config: LossConfig, batch_size: int, seed: int) -> dict:
    """Loss breakdown averaged over fixed, seeded batches (no augmentation)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    order = np.random.default_rng([seed, 104729]).permutation(len(data))
    sums: dict[str, float] = {}
    n_batches = 0
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x, y = _tensor(data, idx, dtype)
        b = model(x, feed=arm.feed)
        br = total_loss(b.bias, b.prob, y, loss_config, arm.objective).as_dict()
        for k, v in br.items():
            sums[k] = sums.get(k, 0.0) + v
        n_batches += 1
    return {k: v / max(n_batches, 1) for k, v in sums.items()}


def calibrate(model: BENet, data: SplitData, arm: Arm, coverage: float, population: str = "all",
              batch_size: int = 128) -> DetectorState:
    """One evaluation-mode pass over ``data`` to set the bias threshold."""
    _, stats = collect(model, data, arm.feed, batch_size)
    if population == "real":
        stats = stats[data.labels == 0]
    tau = calibrate_threshold(stats, coverage)
    return DetectorState(tau=tau, coverage=coverage, calibration_size=int(stats.size))


def make_optimizer(model: BENet, train_config: TrainConfig) -> torch.optim.Optimizer:
    """Adam with default moment settings; weight decay enters as an L2 gradient term."""
    return torch.optim.Adam(model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)


def _save_snapshot(out_dir, model, x, y, epoch, step, breakdown):
    snap = Path(out_dir) / "divergence"
    snap.mkdir(parents=True, exist_ok=True)
    torch.save({"params": model.state_dict(), "x": x, "y": y}, snap / "snapshot.pt")
    (snap / "info.json").write_text(json.dumps({"epoch": epoch, "step": step, "loss": breakdown}, indent=2))


def train(
    model_config: ModelConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    train_data: SplitData,
    val_data: Optional[SplitData] = None,
    coverage: float = 0.95,
    out_dir=None,
    log_path=None,
    dtype: torch.dtype = torch.float32,
    track_train_loss: bool = True,
) -> TrainResult:
    """Train one arm end to end and (for detector arms) calibrate ``tau``.

    Model initialisation, shuffling and augmentation all derive from
    ``train_config.seed``. The parameters with the best validation AUC are
    kept (ties broken by lower validation loss, then the earlier epoch).
    """
    tc = train_config
    arm = get_arm(tc.arm)
    train_data = train_data.select(tc.family)
    if val_data is not None:
        val_data = val_data.select(tc.family)
    if len(np.unique(train_data.labels)) < 2:
        raise InputError("training split must contain both real and fake samples")

    model_config = replace(model_config, seed=tc.seed)
    model = BENet(model_config).to(dtype)
    opt = make_optimizer(model, tc)
    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None

    def record(entry):
        history.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()

    def validate(entry):
        if val_data is None or len(val_data) == 0 or len(np.unique(val_data.labels)) < 2:
            return
        probs, _ = collect(model, val_data, arm.feed, tc.eval_batch_size)
        entry["val_auc"] = M.auc(val_data.labels, probs)
        entry["val_acc"] = M.accuracy(val_data.labels, (probs > 0.5).astype(int))
        entry["val_loss"] = mean_loss(model, val_data, arm, loss_config, tc.batch_size, tc.seed)["total"]

    def score(entry):
        return (entry.get("val_auc", 0.0), -entry.get("val_loss", 0.0))

    entry = {"epoch": 0}
    if track_train_loss:
        entry["train_eval"] = mean_loss(model, train_data, arm, loss_config, tc.batch_size, tc.seed)
    validate(entry)
    record(entry)
    best_state, best_epoch, best_score = copy.deepcopy(model.state_dict()), 0, score(entry)

    try:
        for epoch in range(1, tc.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            rng = np.random.default_rng([tc.seed, epoch])
            order = rng.permutation(len(train_data))
            sums: dict[str, float] = {}
            n_batches = 0
            for step, start in enumerate(range(0, len(order), tc.batch_size)):
                idx = order[start : start + tc.batch_size]
                x, y = _tensor(train_data, idx, dtype)
                if tc.augment:
                    x = torch.stack([augment(xi, rng) for xi in x])
                try:
                    b = model(x, feed=arm.feed)
                except NumericalError as exc:
                    if out_dir is not None:
                        _save_snapshot(out_dir, model, x, y, epoch, step, {"error": str(exc)})
                    raise DivergenceError(f"epoch {epoch}, step {step}: {exc}") from exc
                br = total_loss(b.bias, b.prob, y, loss_config, arm.objective)
                if not torch.isfinite(br.total):
                    if out_dir is not None:
                        _save_snapshot(out_dir, model, x, y, epoch, step, br.as_dict())
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {br.as_dict()}")
                opt.zero_grad(set_to_none=True)
                br.total.backward()
                opt.step()
                for k, v in br.as_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            entry = {"epoch": epoch, "train": {k: v / max(n_batches, 1) for k, v in sums.items()}}
            if track_train_loss:
                entry["train_eval"] = mean_loss(model, train_data, arm, loss_config, tc.batch_size, tc.seed)
            validate(entry)
            entry["seconds"] = round(time.perf_counter() - t0, 3)
            record(entry)
            log.info("epoch %d %s", epoch, {k: v for k, v in entry.items() if k != "train_eval"})
            if score(entry) > best_score:
                best_state, best_epoch, best_score = copy.deepcopy(model.state_dict()), epoch, score(entry)
    finally:
        if log_fh is not None:
            log_fh.close()

    model.load_state_dict(best_state)
    model.eval()
    if arm.detector:
        detector = calibrate(model, train_data, arm, coverage, tc.calibrate_on, tc.eval_batch_size)
    else:
        detector = DetectorState.disabled()
    return TrainResult(model, detector, tc.arm, tc.seed, best_epoch, history, model_config, loss_config, tc)


def evaluate_model(model: BENet, detector: DetectorState, data: SplitData, arm: str,
                   family: Optional[str] = None, batch_size: int = 128) -> M.MetricsReport:
    data = data.select(family)
    probs, stats = collect(model, data, get_arm(arm).feed, batch_size)
    tau = detector.tau if detector.tau is not None else math.inf
    labels, scores, routes = decide(stats, probs, tau)
    return M.evaluate(data.labels, scores, labels, routes, None if math.isinf(tau) else tau)


# --- checkpoints ---------------------------------------------------------

PARAMS_FILE = "params.pt"
MANIFEST_FILE = "manifest.json"


def resolved_config(result: TrainResult) -> dict:
    return {
        "model": asdict(result.model_config),
        "loss": asdict(result.loss_config),
        "train": asdict(result.train_config),
    }


def save_checkpoint(result: TrainResult, out_dir, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(result.model.state_dict(), out / PARAMS_FILE)
    cfg = resolved_config(result)
    tau = result.detector.tau
    manifest = {
        "config_hash": config_hash(cfg),
        "arm": result.arm,
        "seed": result.seed,
        "epoch": result.best_epoch,
        "tau": None if tau is None or math.isinf(tau) else tau,
        "coverage": result.detector.coverage,
        "statistic": result.detector.statistic,
        "calibration_size": result.detector.calibration_size,
        "metrics": result.history,
        "config": cfg,
        "dtype": str(next(result.model.parameters()).dtype).replace("torch.", ""),
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(path) -> tuple[BENet, DetectorState, dict]:
    """Load ``(model, detector, manifest)``; any defect raises CheckpointError."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text())
        cfg = manifest["config"]
        model_config = ModelConfig(**cfg["model"])
        model = BENet(model_config).to(getattr(torch, manifest.get("dtype", "float32")))
        state = torch.load(path / PARAMS_FILE, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        tau = manifest["tau"]
        detector = DetectorState(
            tau=math.inf if tau is None else float(tau),
            coverage=float(manifest["coverage"]),
            calibration_size=int(manifest.get("calibration_size", 0)),
        )
        get_arm(manifest["arm"])
    except Exception as exc:  # noqa: BLE001 - every failure mode maps to one error
        raise CheckpointError(f"cannot load checkpoint from {path}: {exc}") from exc
    model.eval()
    return model, detector, manifest


# --- ablation ------------------------------------------------------------

ORDERING_ARMS = ("full", "ae_lsa_be", "ae_lsa_rl", "ae_lsa")
MIN_GAP = 0.03


@dataclass
class AblationRun:
    arm: str
    seed: int
    intra_auc: float
    cross_auc: dict[str, float]
    seconds: float

    @property
    def mean_cross(self) -> float:
        return float(np.mean(list(self.cross_auc.values()))) if self.cross_auc else float("nan")


def run_ablation_matrix(
    model_config: ModelConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    data: dict[str, SplitData],
    arms: Sequence[str],
    seeds: Sequence[int],
    train_family: str = "splice",
    test_families: Optional[Sequence[str]] = None,
    coverage: float = 0.95,
    progress=None,
) -> list[AblationRun]:
    """Train every (arm, seed) on ``train_family``; test intra- and cross-family."""
    if not arms:
        raise ConfigError("ablation needs at least one arm")
    for a in arms:
        get_arm(a)
    present = set(np.unique(data["test"].families)) - {"none"}
    if test_families is None:
        test_families = sorted(present - {train_family})
    runs = []
    for arm in arms:
        for seed in seeds:
            t0 = time.perf_counter()
            tc = replace(train_config, arm=arm, seed=int(seed), family=train_family)
            res = train(model_config, loss_config, tc, data["train"], data.get("val"), coverage=coverage,
                        track_train_loss=False)
            intra = evaluate_model(res.model, res.detector, data["test"], arm, train_family).auc
            cross = {f: evaluate_model(res.model, res.detector, data["test"], arm, f).auc for f in test_families}
            run = AblationRun(arm, int(seed), intra, cross, time.perf_counter() - t0)
            runs.append(run)
            if progress is not None:
                progress(run)
    return runs


def ablation_table(runs: Sequence[AblationRun]) -> list[dict]:
    """Rows keyed by arm: per-seed intra/cross AUC plus means."""
    rows = []
    for arm in dict.fromkeys(r.arm for r in runs):
        mine = [r for r in runs if r.arm == arm]
        row = {"arm": arm, "label": ARMS[arm].label}
        for r in mine:
            row[f"intra_auc_s{r.seed}"] = r.intra_auc
            row[f"cross_auc_s{r.seed}"] = r.mean_cross
        row["intra_auc_mean"] = float(np.mean([r.intra_auc for r in mine]))
        row["cross_auc_mean"] = float(np.mean([r.mean_cross for r in mine]))
        rows.append(row)
    return rows


def ordering_summary(runs: Sequence[AblationRun], min_seeds: int = 2) -> dict:
    """Per-seed check of full >= ae_lsa_be >= ae_lsa_rl >= ae_lsa (mean cross AUC)."""
    by = {(r.arm, r.seed): r.mean_cross for r in runs}
    seeds = sorted({r.seed for r in runs})
    per_seed = {}
    for s in seeds:
        vals = [by.get((a, s)) for a in ORDERING_ARMS]
        if any(v is None for v in vals):
            continue
        chain = all(vals[i] >= vals[i + 1] for i in range(len(vals) - 1))
        gap = vals[0] - vals[-1]
        per_seed[s] = {
            "full_ge_ae_lsa_be": vals[0] >= vals[1],
            "ae_lsa_be_ge_ae_lsa_rl": vals[1] >= vals[2],
            "ae_lsa_rl_ge_ae_lsa": vals[2] >= vals[3],
            "full_minus_ae_lsa_ge_gap": gap >= MIN_GAP,
            "gap": gap,
            "ordering_holds": bool(chain and gap >= MIN_GAP),
        }
    n_ok = sum(v["ordering_holds"] for v in per_seed.values())
    summary = {"per_seed": {str(k): v for k, v in per_seed.items()}, "seeds_passing": n_ok,
               "ordering_holds": bool(per_seed) and n_ok >= min(min_seeds, len(per_seed))}
    for key in ("full_ge_ae_lsa_be", "ae_lsa_be_ge_ae_lsa_rl", "ae_lsa_rl_ge_ae_lsa", "full_minus_ae_lsa_ge_gap"):
        summary[key] = bool(per_seed) and sum(v[key] for v in per_seed.values()) >= min(min_seeds, len(per_seed))
    return summary
