import csv
import json

import numpy as np
import pytest

from bacsa import experiments as exp
from bacsa.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from bacsa.config import (
    CONFIG_KEYS,
    ConfigError,
    ExperimentConfig,
    dump_config,
    parse_config,
    parse_config_text,
)
from bacsa.data import write_idx

TINY = {
    "dataset.per_class": "60",
    "dataset.test_per_class": "20",
    "dataset.dim": "8",
    "fl.clients": "6",
    "fl.select": "2",
    "fl.rounds": "4",
    "fl.hidden": "8",
    "train.epochs": "1",
    "run.figures": "false",
}


def tiny(**extra) -> ExperimentConfig:
    return parse_config_text("", {**TINY, **extra})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestParse:
    def test_minimal_fills_defaults(self):
        cfg = parse_config_text("partition.scheme = ccdd\npartition.phi = 2\n")
        assert cfg.fl.n_clients == 20 and cfg.fl.n_select == 5 and cfg.fl.train.epochs == 5
        assert cfg.fl.train.batch_size == 32 and cfg.fl.train.learning_rate == 0.01
        assert cfg.fl.train.weight_decay == 5e-4 and cfg.fl.rounds == 150
        assert cfg.partition.scheme == "ccdd" and cfg.partition.phi == 2

    def test_phi_above_classes(self):
        with pytest.raises(ConfigError, match="phi"):
            parse_config_text("partition.phi = 11\ndataset.classes = 10\n")

    @pytest.mark.parametrize("text", [
        "",
        "fl.policy = random\nfl.hidden = 16,8\nrun.figures = no\n",
        "partition.scheme = dirichlet\npartition.alpha = 0.1\nfl.n0 = 25\nchannel.hi_db = 30.5\n",
    ])
    def test_roundtrip(self, text):
        cfg = parse_config_text(text)
        again = parse_config_text(dump_config(cfg))
        assert again == cfg
        assert dump_config(again) == dump_config(cfg)

    def test_dump_lists_every_key(self):
        keys = [line.split(" = ")[0] for line in dump_config(ExperimentConfig()).splitlines()]
        assert tuple(keys) == CONFIG_KEYS

    def test_comments_and_blank_lines(self):
        cfg = parse_config_text("# header\n\nfl.rounds = 7  # short run\n")
        assert cfg.fl.rounds == 7

    def test_unknown_key_has_line(self):
        with pytest.raises(ConfigError, match="line 2.*fl.roundz"):
            parse_config_text("fl.rounds = 3\nfl.roundz = 4\n")

    def test_bad_value_has_key(self):
        with pytest.raises(ConfigError, match="line 1.*fl.rounds"):
            parse_config_text("fl.rounds = many\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("fl.rounds 3\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("fl.rounds = 3\nfl.rounds = 4\n")

    def test_overrides_win(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("fl.rounds = 3\nfl.policy = random\n")
        cfg = parse_config(p, {"fl.rounds": "9"})
        assert cfg.fl.rounds == 9 and cfg.fl.policy == "random"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.cfg")

    @pytest.mark.parametrize("extra", [
        {"dataset.source": "idx"},
        {"dataset.train_images": "x.idx"},
        {"fl.select": "30"},
        {"fl.policy": "best"},
        {"fl.variance": "other"},
        {"channel.lo_db": "5", "channel.hi_db": "1"},
        {"run.seeds": "0"},
        {"run.policies": "random,nope"},
        {"train.batch_size": "0"},
        {"fl.clients": "3", "partition.phi": "2"},
    ])
    def test_invalid_combinations(self, extra):
        with pytest.raises(ConfigError):
            parse_config_text("", extra)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    summary = exp.run_experiment(tiny(**{"run.seeds": "2"}), out)
    return out, summary


class TestRunExperiment:
    def test_rounds_csv(self, run_dir):
        out, _ = run_dir
        rows = read_csv(out / "rounds.csv")
        assert rows[0] == ["round", "policy", "accuracy", "loss", "objective"]
        assert len(rows) == 1 + 4
        assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]

    def test_counts_and_profile(self, run_dir):
        out, _ = run_dir
        counts = read_csv(out / "counts.csv")
        assert counts[0] == ["client", "m", "snr_db"] and len(counts) == 7
        assert sum(int(r[1]) for r in counts[1:]) == 4 * 2
        prof = read_csv(out / "profile.csv")
        assert prof[0] == ["client", "class", "p_true", "p_hat", "beta"]
        assert len(prof) == 1 + 6 * 10
        p_hat = np.array([float(r[3]) for r in prof[1:]]).reshape(6, 10)
        np.testing.assert_allclose(p_hat.sum(axis=1), 1.0, atol=1e-8)

    def test_line_endings(self, run_dir):
        out, _ = run_dir
        raw = (out / "rounds.csv").read_bytes()
        assert b"\r" not in raw and raw.endswith(b"\n")

    def test_summary(self, run_dir):
        out, summary = run_dir
        loaded = exp.load_summary(out / "summary.json")
        assert loaded == json.loads(json.dumps(summary))
        fa = loaded["final_accuracy"]
        assert len(fa["per_seed"]) == 2
        assert fa["mean"] == pytest.approx(np.mean(fa["per_seed"]))
        assert fa["std"] == pytest.approx(np.std(fa["per_seed"]))

    def test_rerun_is_byte_identical(self, run_dir, tmp_path):
        out, _ = run_dir
        exp.run_experiment(tiny(**{"run.seeds": "2"}), tmp_path)
        for name in ("rounds.csv", "counts.csv", "profile.csv", "summary.json"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_unknown_summary_version(self, tmp_path):
        p = tmp_path / "summary.json"
        p.write_text(json.dumps({"schema_version": 99}))
        with pytest.raises(exp.SummaryVersionError):
            exp.load_summary(p)

    def test_figures(self, tmp_path):
        exp.run_experiment(tiny(**{"run.figures": "true", "fl.rounds": "2"}), tmp_path)
        for name in ("rounds.png", "counts.png", "profile.png"):
            assert (tmp_path / name).read_bytes()[:4] == b"\x89PNG"


class TestMonteCarlo:
    def test_two_runs_four_rows(self, tmp_path):
        cfg = tiny(**{"run.montecarlo_h": "2", "partition.scheme": "dirichlet", "partition.alpha": "0.3"})
        res = exp.run_montecarlo_init(cfg, tmp_path)
        rows = read_csv(tmp_path / "mc.csv")
        assert rows[0] == ["run", "init", "mean_kappa"]
        assert [r[:2] for r in rows[1:]] == [["0", "bacsa"], ["0", "glorot"], ["1", "bacsa"], ["1", "glorot"]]
        assert res.kappa["bacsa"].shape == (2,)

    def test_deterministic(self, tmp_path):
        cfg = tiny(**{"run.montecarlo_h": "2"})
        exp.run_montecarlo_init(cfg, tmp_path / "a")
        exp.run_montecarlo_init(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "mc.csv").read_bytes() == (tmp_path / "b" / "mc.csv").read_bytes()

    def test_h_below_two(self, tmp_path):
        with pytest.raises(ConfigError):
            exp.run_montecarlo_init(tiny(**{"run.montecarlo_h": "1"}), tmp_path)

    def test_sign_test(self):
        wins, trials, p = exp.sign_test(np.zeros(10), np.ones(10))
        assert (wins, trials) == (10, 10) and p == pytest.approx(0.5**10)
        assert exp.sign_test(np.ones(3), np.ones(3))[2] == 1.0


class TestCompare:
    def test_single_seed_single_policy(self, tmp_path):
        exp.compare_policies(tiny(), ["random"], [0], tmp_path)
        rows = read_csv(tmp_path / "comparison.csv")
        assert rows[0] == ["policy", "seed", "final_accuracy", "best_accuracy", "final_std", "best_std"]
        assert len(rows) == 1 + 1 + 1
        assert rows[2][1] == "mean" and rows[2][4] == "0" and rows[2][5] == "0"

    def test_empty_policy_list(self, tmp_path):
        with pytest.raises(ConfigError):
            exp.compare_policies(tiny(), [], [0], tmp_path)

    def test_iid_all_clients_on_top(self, tmp_path):
        cfg = tiny(**{"partition.scheme": "iid", "fl.rounds": "15", "dataset.per_class": "150",
                      "dataset.dim": "16", "fl.hidden": "16"})
        cmp_ = exp.compare_policies(cfg, ["random", "bacsa", "all_clients"], [0, 1], tmp_path)
        means = {p: cmp_.final(p).mean() for p in ("random", "bacsa", "all_clients")}
        assert means["all_clients"] >= max(means["random"], means["bacsa"])
        rounds = read_csv(tmp_path / "comparison_rounds.csv")
        assert len(rounds) == 1 + 3 * 2 * 15


class TestPartitionStats:
    def test_ccdd_counts(self, tmp_path):
        counts = exp.partition_stats(tiny(), tmp_path)
        rows = read_csv(tmp_path / "partition.csv")
        assert rows[0] == ["client", "class", "count", "proportion"]
        assert len(rows) == 1 + 6 * 10
        assert ((counts > 0).sum(axis=0) == 2).all()
        assert counts.sum() == 600


class TestCli:
    ARGS = [f"--set={k}={v}" for k, v in TINY.items()]

    def test_run_exit_ok(self, tmp_path, capsys):
        assert main(["run", "--out", str(tmp_path), "--rounds", "3", "--policy", "random", *self.ARGS]) == EXIT_OK
        assert "random: final" in capsys.readouterr().out
        assert len(read_csv(tmp_path / "rounds.csv")) == 4

    def test_flag_beats_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("fl.rounds = 50\nfl.policy = bacsa\n")
        assert main(["show-config", "--config", str(cfg), "--rounds", "2", "--seed", "7"]) == EXIT_OK
        text = capsys.readouterr().out
        assert "fl.rounds = 2\n" in text and "fl.policy = bacsa\n" in text and "run.seed = 7\n" in text

    def test_config_error_exit(self, tmp_path, capsys):
        assert main(["run", "--out", str(tmp_path), "--set", "partition.phi=11"]) == EXIT_CONFIG
        assert "phi" in capsys.readouterr().err

    def test_unknown_key_exit(self, tmp_path):
        assert main(["run", "--out", str(tmp_path), "--set", "fl.bogus=1"]) == EXIT_CONFIG

    def test_bad_flag_exit(self):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--rounds", "many"])
        assert exc.value.code == 2

    def test_runtime_error_exit(self, tmp_path, capsys):
        bad = tmp_path / "img.idx"
        bad.write_bytes(b"\x00\x00\x08\x03")
        args = ["run", "--out", str(tmp_path / "o"), "--set", "dataset.source=idx",
                "--set", f"dataset.train_images={bad}", "--set", f"dataset.train_labels={bad}",
                "--set", f"dataset.test_images={bad}", "--set", f"dataset.test_labels={bad}"]
        assert main(args) == EXIT_RUNTIME
        assert "error" in capsys.readouterr().err

    def test_out_not_writable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["partition-stats", "--out", str(blocker / "sub"), *self.ARGS]) == EXIT_CONFIG

    def test_montecarlo_and_compare(self, tmp_path, capsys):
        assert main(["montecarlo", "--runs", "2", "--out", str(tmp_path / "mc"), *self.ARGS]) == EXIT_OK
        assert main(["compare", "--policies", "random,bacsa", "--out", str(tmp_path / "c"), *self.ARGS]) == EXIT_OK
        out = capsys.readouterr().out
        assert "sign test" in out and "bacsa: final" in out

    def test_montecarlo_h_one_is_config_error(self, tmp_path):
        assert main(["montecarlo", "--runs", "1", "--out", str(tmp_path), *self.ARGS]) == EXIT_CONFIG

    def test_idx_source(self, tmp_path):
        rng = np.random.default_rng(0)
        paths = {}
        for split, n in (("train", 120), ("test", 40)):
            imgs = rng.integers(0, 256, size=(n, 3, 3), dtype=np.uint8)
            labels = np.arange(n, dtype=np.uint8) % 10
            paths[split] = (tmp_path / f"{split}-img", tmp_path / f"{split}-lab")
            write_idx(imgs, labels, *paths[split])
        args = ["run", "--out", str(tmp_path / "o"), "--rounds", "2", "--set", "dataset.source=idx",
                "--set", f"dataset.train_images={paths['train'][0]}", "--set", f"dataset.train_labels={paths['train'][1]}",
                "--set", f"dataset.test_images={paths['test'][0]}", "--set", f"dataset.test_labels={paths['test'][1]}",
                "--set", "fl.clients=6", "--set", "fl.select=2", "--set", "fl.hidden=4", "--no-figures"]
        assert main(args) == EXIT_OK
