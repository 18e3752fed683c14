import hashlib
import json
import os

import numpy as np
import pytest

from ehinfer.cli import main
from ehinfer.confidence import load_jsonl
from ehinfer.env import two_state_env


@pytest.fixture()
def sandbox(tmp_path, monkeypatch):
    monkeypatch.delenv("EH_INFER_SEED", raising=False)
    monkeypatch.chdir(tmp_path)
    env = two_state_env(0.9, 0.5, 0.8, 0.0, b_max=3)
    with open(tmp_path / "env.json", "w") as fh:
        json.dump(env.to_config(), fh)
    return tmp_path


def gen(sandbox, name="ds.jsonl", n=400, seed=7, extra=()):
    rc = main(["gen-data", "--n", str(n), "--seed", str(seed),
               "--out", str(sandbox / name), *extra])
    assert rc == 0
    return sandbox / name


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSeeding:
    def test_missing_seed_everywhere_is_an_error(self, sandbox, capsys):
        rc = main(["gen-data", "--n", "10", "--out", "x.jsonl"])
        assert rc == 2
        assert "seed" in capsys.readouterr().err

    def test_environment_variable_fallback(self, sandbox, monkeypatch):
        monkeypatch.setenv("EH_INFER_SEED", "7")
        assert main(["gen-data", "--n", "50", "--out", "a.jsonl"]) == 0
        ds_env = load_jsonl(sandbox / "a.jsonl")
        gen(sandbox, "b.jsonl", n=50, seed=7)
        ds_flag = load_jsonl(sandbox / "b.jsonl")
        assert np.array_equal(ds_env.z, ds_flag.z)

    def test_garbage_environment_seed(self, sandbox, monkeypatch):
        monkeypatch.setenv("EH_INFER_SEED", "yes")
        assert main(["gen-data", "--n", "10", "--out", "x.jsonl"]) == 2


class TestGenData:
    def test_reruns_are_byte_identical(self, sandbox):
        a = gen(sandbox, "a.jsonl")
        b = gen(sandbox, "b.jsonl")
        assert sha(a) == sha(b)
        assert sha(sandbox / "a.jsonl.summary.json") == \
               sha(sandbox / "b.jsonl.summary.json")

    def test_summary_contents(self, sandbox):
        gen(sandbox)
        summary = json.loads((sandbox / "ds.jsonl.summary.json").read_text())
        assert summary["n_records"] == 400
        assert summary["seed"] == 7
        assert len(summary["per_exit_accuracy"]) == 4
        assert summary["spec"]["n_classes"] == 200

    def test_zero_records_rejected(self, sandbox):
        assert main(["gen-data", "--n", "0", "--seed", "1",
                     "--out", "x.jsonl"]) == 2

    def test_bad_spec_rejected(self, sandbox):
        spec = sandbox / "spec.json"
        spec.write_text(json.dumps({"accuracies": [0.9, 0.5]}))
        # exit 0 accuracy must be the uninformed guess rate
        assert main(["gen-data", "--n", "10", "--seed", "1",
                     "--spec", str(spec), "--out", "x.jsonl"]) == 2

    def test_spec_file_shapes_dataset(self, sandbox):
        spec = sandbox / "spec.json"
        spec.write_text(json.dumps(
            {"accuracies": [0.01, 0.5, 0.9], "n_classes": 100}))
        gen(sandbox, "three.jsonl", extra=("--spec", str(spec)))
        assert load_jsonl(sandbox / "three.jsonl").n_exits == 3


class TestSolve:
    def test_mms_report(self, sandbox):
        ds = gen(sandbox)
        rc = main(["solve", "--kind", "mms", "--env", "env.json",
                   "--dataset", str(ds), "--out", "mms.json"])
        assert rc == 0
        report = json.loads((sandbox / "mms.json.report.json").read_text())
        assert report["monotone"] is True
        assert report["superadditive"] is True
        assert report["kind"] == "mms"

    def test_rho_list_alternative(self, sandbox):
        rc = main(["solve", "--kind", "mms", "--env", "env.json",
                   "--rho", "0.005,0.53,0.69,0.83", "--out", "mms.json"])
        assert rc == 0

    def test_rho_length_mismatch(self, sandbox):
        assert main(["solve", "--kind", "mms", "--env", "env.json",
                     "--rho", "0.1,0.9", "--out", "x.json"]) == 2

    def test_oracle_requires_dataset(self, sandbox):
        assert main(["solve", "--kind", "oracle", "--env", "env.json",
                     "--out", "x.json"]) == 2

    def test_oracle_report_records_contraction(self, sandbox):
        ds = gen(sandbox)
        rc = main(["solve", "--kind", "oracle", "--env", "env.json",
                   "--dataset", str(ds), "--eps", "1e-4",
                   "--out", "sol.json"])
        assert rc == 0
        report = json.loads((sandbox / "sol.json.report.json").read_text())
        assert report["residual_final"] <= 1e-4
        assert 0 < report["contraction_ratio_max"] < 1

    def test_periodic_chain_solves_but_cannot_simulate(self, sandbox):
        # a periodic chain still defines a well-formed planning problem,
        # but simulation needs a stationary initial law and must refuse
        cfg = json.loads((sandbox / "env.json").read_text())
        cfg["transition"] = [[0.0, 1.0], [1.0, 0.0]]
        with open(sandbox / "bad_env.json", "w") as fh:
            json.dump(cfg, fh)
        rc = main(["solve", "--kind", "mms", "--env", "bad_env.json",
                   "--rho", "0.005,0.53,0.69,0.83", "--out", "p.json"])
        assert rc == 0
        ds = gen(sandbox)
        rc = main(["simulate", "--env", "bad_env.json", "--dataset", str(ds),
                   "--controller", "mms", "--policy", "p.json",
                   "--episodes", "1", "--epochs", "10", "--seed", "0",
                   "--out", "r.csv"])
        assert rc == 2

    def test_missing_env_file(self, sandbox):
        assert main(["solve", "--kind", "mms", "--env", "nope.json",
                     "--rho", "0.1,0.2,0.3,0.4", "--out", "x.json"]) == 2


class TestSimulate:
    def test_end_to_end_and_missing_artifact(self, sandbox):
        ds = gen(sandbox)
        assert main(["simulate", "--env", "env.json", "--dataset", str(ds),
                     "--controller", "mms", "--policy", "nope.json",
                     "--seed", "0", "--out", "r.csv"]) == 5
        main(["solve", "--kind", "mms", "--env", "env.json",
              "--dataset", str(ds), "--out", "mms.json"])
        rc = main(["simulate", "--env", "env.json", "--dataset", str(ds),
                   "--controller", "mms", "--policy", "mms.json",
                   "--episodes", "2", "--epochs", "100",
                   "--seed", "0", "--out", "r.csv"])
        assert rc == 0
        lines = (sandbox / "r.csv").read_text().splitlines()
        meta = [l for l in lines if l.startswith("#")]
        assert any("controller=MmS" in l for l in meta)
        body = [l for l in lines if not l.startswith("#")]
        assert body[0].startswith("episode,accuracy")
        assert len(body) == 1 + 2

    def test_fixed_requires_mode_k(self, sandbox):
        ds = gen(sandbox)
        assert main(["simulate", "--env", "env.json", "--dataset", str(ds),
                     "--controller", "fixed", "--seed", "0",
                     "--out", "r.csv"]) == 2

    def test_random_controller_runs_seedless_artifacts(self, sandbox):
        ds = gen(sandbox)
        rc = main(["simulate", "--env", "env.json", "--dataset", str(ds),
                   "--controller", "random", "--episodes", "2",
                   "--epochs", "50", "--seed", "3", "--out", "r.csv"])
        assert rc == 0
        rc = main(["simulate", "--env", "env.json", "--dataset", str(ds),
                   "--controller", "random", "--episodes", "2",
                   "--epochs", "50", "--seed", "3", "--out", "r2.csv"])
        assert sha(sandbox / "r.csv") == sha(sandbox / "r2.csv")


class TestTrainDqn:
    def test_zero_steps_writes_untrained_artifacts(self, sandbox, capsys):
        ds = gen(sandbox, n=200)
        rc = main(["train-dqn", "--env", "env.json", "--dataset", str(ds),
                   "--steps", "0", "--seed", "0", "--out", "net.json"])
        assert rc == 0
        assert "untrained" in capsys.readouterr().err
        assert (sandbox / "net.json").is_file()
        curve = (sandbox / "net.json.curve.csv").read_text().splitlines()
        assert curve[-1] == "step,eval_accuracy,loss"

    def test_bad_learning_rate(self, sandbox):
        ds = gen(sandbox, n=200)
        assert main(["train-dqn", "--env", "env.json", "--dataset", str(ds),
                     "--steps", "100", "--lr", "-1", "--seed", "0",
                     "--out", "net.json"]) == 4

    def test_short_training_produces_usable_checkpoint(self, sandbox):
        ds = gen(sandbox, n=200)
        rc = main(["train-dqn", "--env", "env.json", "--dataset", str(ds),
                   "--steps", "300", "--eps-decay", "150",
                   "--eval-every", "300", "--eval-epochs", "30",
                   "--seed", "0", "--out", "net.json"])
        assert rc == 0
        rc = main(["simulate", "--env", "env.json", "--dataset", str(ds),
                   "--controller", "inc-dqn", "--checkpoint", "net.json",
                   "--episodes", "1", "--epochs", "50", "--seed", "0",
                   "--out", "r.csv"])
        assert rc == 0


class TestExitProbs:
    def test_mms_rows_are_one_hot(self, sandbox):
        ds = gen(sandbox)
        main(["solve", "--kind", "mms", "--env", "env.json",
              "--dataset", str(ds), "--out", "mms.json"])
        rc = main(["exit-probs", "--env", "env.json", "--controller", "mms",
                   "--policy", "mms.json", "--out", "eta.csv"])
        assert rc == 0
        lines = [l for l in (sandbox / "eta.csv").read_text().splitlines()
                 if not l.startswith("#")]
        assert lines[0] == "b,h,k,eta"
        per_state = {}
        for b, h, k, v in (l.split(",") for l in lines[1:]):
            per_state.setdefault((b, h), []).append(float(v))
        for probs in per_state.values():
            assert sum(probs) == pytest.approx(1.0)
            assert sorted(set(probs)) in ([0.0, 1.0], [1.0])

    def test_incompatible_policy_is_input_error(self, sandbox):
        ds = gen(sandbox)
        main(["solve", "--kind", "mms", "--env", "env.json",
              "--dataset", str(ds), "--out", "mms.json"])
        # one-shot table handed to the incremental walker
        assert main(["exit-probs", "--env", "env.json",
                     "--controller", "inc-iag", "--policy", "mms.json",
                     "--out", "eta.csv"]) == 2


class TestCalibrate:
    def test_fit_needs_logits(self, sandbox):
        ds = gen(sandbox)   # no --logits
        assert main(["calibrate", "--dataset", str(ds), "--fit",
                     "--out", "cal.jsonl"]) == 2

    def test_fit_with_logits(self, sandbox):
        ds = gen(sandbox, "ds.jsonl", extra=("--logits",))
        rc = main(["calibrate", "--dataset", str(ds), "--fit",
                   "--out", "cal.jsonl"])
        assert rc == 0
        summary = json.loads((sandbox / "cal.jsonl.summary.json").read_text())
        assert summary["tau"] > 0

    def test_fixed_tau_distorts(self, sandbox):
        ds = gen(sandbox)
        rc = main(["calibrate", "--dataset", str(ds), "--tau", "0.5",
                   "--out", "warped.jsonl"])
        assert rc == 0
        warped = load_jsonl(sandbox / "warped.jsonl")
        clean = load_jsonl(ds)
        assert not np.allclose(warped.z[:, 1:], clean.z[:, 1:])
        assert np.array_equal(warped.correct, clean.correct)


class TestSweep:
    def test_row_count_and_dqn_rejected(self, sandbox):
        ds = gen(sandbox, n=300)
        grid = sandbox / "grid.json"
        grid.write_text(json.dumps({
            "p_g": [0.9], "p_b": [0.5], "pe_g": [0.8], "pe_b": [0.0],
            "b_max": [2], "seeds": [0, 1], "episodes": 2, "epochs": 50}))
        rc = main(["sweep", "--grid", str(grid), "--dataset", str(ds),
                   "--kinds", "MmS,RandomFeasible", "--seed", "0",
                   "--out", "rows.csv"])
        assert rc == 0
        body = [l for l in (sandbox / "rows.csv").read_text().splitlines()
                if not l.startswith("#")]
        assert len(body) == 1 + 1 * 2 * 2   # header + cells*kinds*seeds
        assert main(["sweep", "--grid", str(grid), "--dataset", str(ds),
                     "--kinds", "IncIAwDQN", "--seed", "0",
                     "--out", "rows.csv"]) == 2
