import json
import math

import numpy as np
import pytest
import torch

import benet.training as T
from benet.errors import CheckpointError, ConfigError, DivergenceError, InputError
from benet.losses import LossConfig
from benet.model import BENet, ModelConfig
from benet.synth import SyntheticSpec, generate_split
from benet.training import (
    ARMS,
    AblationRun,
    TrainConfig,
    ablation_table,
    evaluate_model,
    get_arm,
    load_checkpoint,
    make_optimizer,
    ordering_summary,
    run_ablation_matrix,
    save_checkpoint,
    train,
)

MODEL = ModelConfig(image_size=16, num_scales=2, base_channels=4, bottleneck_channels=8, mlp_hidden=8)
SPEC = SyntheticSpec(image_size=16, n_train=8, n_val=4, n_test=4, families=("splice", "warp"), seed=2)


@pytest.fixture(scope="module")
def data():
    return {s: generate_split(SPEC, s) for s in ("train", "val", "test")}


def params_of(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def same_params(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def run(data, **kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("family", "splice")
    return train(MODEL, LossConfig(), TrainConfig(**kw), data["train"], data["val"])


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"arm": "bogus"}, {"batch_size": 0}, {"lr": -1.0}, {"weight_decay": -1e-5}, {"epochs": -1},
         {"calibrate_on": "fake"}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_defaults(self):
        tc = TrainConfig()
        assert (tc.batch_size, tc.lr, tc.weight_decay, tc.arm) == (8, 2e-4, 1e-5, "full")


class TestArms:
    def test_full_enables_everything(self):
        full = get_arm("full")
        assert (full.feed, full.objective, full.detector) == ("bias_lsa", "be", True)

    @pytest.mark.parametrize(
        "name,feed,objective,detector",
        [
            ("no_ae", "raw", "ce", False),
            ("ae_no_bias", "recon", "ce", False),
            ("ae", "bias", "ce", False),
            ("ae_lsa", "bias_lsa", "ce", False),
            ("ae_lsa_rl", "bias_lsa", "rl", False),
            ("ae_lsa_be", "bias_lsa", "be", False),
            ("ae_lsa_cd", "bias_lsa", "ce", True),
        ],
    )
    def test_lattice(self, name, feed, objective, detector):
        arm = ARMS[name]
        assert (arm.feed, arm.objective, arm.detector) == (feed, objective, detector)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            get_arm("everything")

    def test_no_ae_bias_path_inert(self):
        model = BENet(MODEL)
        out = model(torch.rand(2, 3, 16, 16), feed="raw")
        assert out.bias is None


class TestTrain:
    def test_zero_epochs_is_init(self, data):
        res = run(data, epochs=0, seed=4)
        init = BENet(ModelConfig(**{**MODEL.__dict__, "seed": 4}))
        assert same_params(params_of(res.model), params_of(init))
        assert res.best_epoch == 0 and len(res.history) == 1

    def test_zero_lr_leaves_params(self, data):
        res = run(data, epochs=1, lr=0.0, seed=1)
        init = BENet(ModelConfig(**{**MODEL.__dict__, "seed": 1}))
        assert same_params(params_of(res.model), params_of(init))

    def test_weight_decay_shrinks_norm(self):
        model = BENet(MODEL)
        opt = make_optimizer(model, TrainConfig(lr=1e-3, weight_decay=1e-2))
        norm = lambda: float(torch.nn.utils.parameters_to_vector(model.parameters()).detach().norm())  # noqa: E731
        norms = [norm()]
        for _ in range(5):
            for p in model.parameters():
                p.grad = torch.zeros_like(p)
            opt.step()
            norms.append(norm())
        assert all(a > b for a, b in zip(norms, norms[1:]))

    def test_deterministic(self, data):
        a, b = run(data, epochs=2, seed=3), run(data, epochs=2, seed=3)
        assert same_params(params_of(a.model), params_of(b.model))
        strip = lambda h: [{k: v for k, v in e.items() if k != "seconds"} for e in h]  # noqa: E731
        assert strip(a.history) == strip(b.history)
        c = run(data, epochs=2, seed=4)
        assert not same_params(params_of(a.model), params_of(c.model))

    def test_history_and_log(self, data, tmp_path):
        log = tmp_path / "log.jsonl"
        res = train(MODEL, LossConfig(), TrainConfig(epochs=2, family="splice"), data["train"], data["val"],
                    log_path=log)
        lines = [json.loads(x) for x in log.read_text().splitlines()]
        assert [e["epoch"] for e in lines] == [0, 1, 2]
        for e in lines[1:]:
            assert {"l1", "l2", "l3", "l_be", "l_c", "total"} <= set(e["train"])
            assert 0 <= e["val_auc"] <= 1
        assert res.best_epoch in (0, 1, 2)

    def test_best_epoch_has_best_val(self, data):
        res = run(data, epochs=3)
        aucs = [e["val_auc"] for e in res.history]
        assert aucs[res.best_epoch] == max(aucs)

    def test_detector_coverage(self, data):
        res = run(data, arm="ae_lsa_cd")
        train_data = data["train"].select("splice")
        _, stats = T.collect(res.model, train_data, "bias_lsa")
        assert res.detector.calibration_size == len(train_data)
        assert np.mean(stats > res.detector.tau) <= 0.05

    def test_real_only_calibration(self, data):
        res = run(data, arm="full", calibrate_on="real")
        assert res.detector.calibration_size == int((data["train"].labels == 0).sum())

    def test_no_detector_arm_disabled(self, data):
        res = run(data, arm="ae_lsa")
        assert res.detector.tau == math.inf

    def test_single_class_rejected(self, data):
        reals = data["train"].take(np.flatnonzero(data["train"].labels == 0))
        with pytest.raises(InputError):
            train(MODEL, LossConfig(), TrainConfig(epochs=1), reals)

    def test_divergence_snapshot(self, data, tmp_path, monkeypatch):
        real_total = T.total_loss

        def poisoned(*args, **kw):
            br = real_total(*args, **kw)
            br.total = br.total * math.nan
            return br

        monkeypatch.setattr(T, "total_loss", poisoned)
        with pytest.raises(DivergenceError):
            train(MODEL, LossConfig(), TrainConfig(epochs=1, family="splice"), data["train"], out_dir=tmp_path,
                  track_train_loss=False)
        assert (tmp_path / "divergence" / "snapshot.pt").is_file()
        assert json.loads((tmp_path / "divergence" / "info.json").read_text())["epoch"] == 1


class TestCheckpoint:
    def test_round_trip_bit_exact(self, data, tmp_path):
        res = run(data, epochs=1)
        save_checkpoint(res, tmp_path)
        model, detector, manifest = load_checkpoint(tmp_path)
        probe = torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            a, b = res.model(probe), model(probe)
        for name in ("reconstruction", "bias", "attention", "mask", "fused", "logit", "prob"):
            assert torch.equal(getattr(a, name), getattr(b, name)), name
        assert detector.tau == res.detector.tau
        for key in ("config_hash", "arm", "seed", "epoch", "tau", "coverage", "metrics"):
            assert key in manifest

    def test_metrics_identical_after_reload(self, data, tmp_path):
        res = run(data, epochs=1)
        save_checkpoint(res, tmp_path)
        model, detector, _ = load_checkpoint(tmp_path)
        a = evaluate_model(res.model, res.detector, data["test"], "full")
        b = evaluate_model(model, detector, data["test"], "full")
        assert a == b

    def test_disabled_tau_stored_as_null(self, data, tmp_path):
        save_checkpoint(run(data, arm="ae"), tmp_path)
        assert json.loads((tmp_path / "manifest.json").read_text())["tau"] is None
        _, detector, _ = load_checkpoint(tmp_path)
        assert detector.tau == math.inf

    @pytest.mark.parametrize("damage", ["truncate", "no_manifest", "bad_json", "no_params"])
    def test_corrupt(self, data, tmp_path, damage):
        save_checkpoint(run(data, epochs=0), tmp_path)
        if damage == "truncate":
            blob = (tmp_path / "params.pt").read_bytes()
            (tmp_path / "params.pt").write_bytes(blob[: len(blob) // 2])
        elif damage == "no_manifest":
            (tmp_path / "manifest.json").unlink()
        elif damage == "bad_json":
            (tmp_path / "manifest.json").write_text("{")
        else:
            (tmp_path / "params.pt").unlink()
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)


class TestAblation:
    def test_matrix_rows(self, data):
        runs = run_ablation_matrix(MODEL, LossConfig(), TrainConfig(epochs=1), data, ["ae", "full"], [0])
        assert {r.arm for r in runs} == {"ae", "full"}
        assert all(set(r.cross_auc) == {"warp"} for r in runs)
        assert [row["arm"] for row in ablation_table(runs)] == ["ae", "full"]

    def test_empty_arms(self, data):
        with pytest.raises(ConfigError):
            run_ablation_matrix(MODEL, LossConfig(), TrainConfig(epochs=1), data, [], [0])

    @staticmethod
    def fake_runs(values_by_seed):
        return [
            AblationRun(arm, seed, 0.9, {"warp": v}, 0.0)
            for seed, values in values_by_seed.items()
            for arm, v in zip(T.ORDERING_ARMS, values)
        ]

    def test_summary_passes_on_two_of_three(self):
        runs = self.fake_runs({0: (0.9, 0.85, 0.8, 0.7), 1: (0.9, 0.88, 0.86, 0.8), 2: (0.7, 0.8, 0.9, 0.95)})
        s = ordering_summary(runs)
        assert s["ordering_holds"] and s["seeds_passing"] == 2
        for key in ("full_ge_ae_lsa_be", "ae_lsa_be_ge_ae_lsa_rl", "ae_lsa_rl_ge_ae_lsa", "full_minus_ae_lsa_ge_gap"):
            assert isinstance(s[key], bool)

    def test_summary_gap_required(self):
        runs = self.fake_runs({0: (0.9, 0.89, 0.88, 0.88), 1: (0.8, 0.8, 0.79, 0.78)})
        s = ordering_summary(runs)
        assert not s["ordering_holds"] and not s["full_minus_ae_lsa_ge_gap"]
        assert s["ae_lsa_be_ge_ae_lsa_rl"]


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_arm_halves_training_loss(seed):
    spec = SyntheticSpec(families=("splice",))
    train_data = generate_split(spec, "train")
    tc = TrainConfig(arm="full", seed=seed, family="splice", epochs=10)
    res = train(ModelConfig(), LossConfig(), tc, train_data)
    first = res.history[0]["train_eval"]["total"]
    best = min(e["train_eval"]["total"] for e in res.history[1:])
    assert best <= 0.5 * first, (first, best)
