import subprocess
import sys

import pytest

import posfree.sweep as sweep
from posfree.cli import main
from posfree.config import ExperimentConfig, format_config, parse_config
from posfree.errors import ConfigError, NumericError

SMALL = """
[synth]
sample_count = 400

[train]
epochs = 2
"""

SMALL_SWEEP = SMALL + """
[sweep]
e_p_values = 0.0, 0.5
sigma_values = 0.1
trials = 1
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("POSFREE_SEED", raising=False)
    return tmp_path


def write(path, text):
    path.write_text(text)
    return str(path)


def records(path):
    return [line for line in path.read_text().splitlines() if not line.startswith("#")]


class TestConfigFile:
    def test_round_trip(self):
        text = format_config(ExperimentConfig())
        assert format_config(parse_config(text)) == text
        assert parse_config(text) == ExperimentConfig()

    def test_defaults_match_published_setup(self):
        cfg = parse_config("")
        assert (cfg.synth.sample_count, cfg.synth.split, cfg.synth.alpha) == (20000, 0.7, -0.1)
        assert cfg.synth.means == (-0.5, -0.25, 0.25, 0.5)
        assert (cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, cfg.train.masks_per_sample) == (200, 256, 0.001, 1)
        assert cfg.model.hidden_dim == 8 and cfg.model.num_layers == 1
        assert cfg.sweep.trials == 5 and len(cfg.sweep.e_p_values) == 6 and len(cfg.sweep.sigma_values) == 5
        assert (cfg.cost.num_layers, len(cfg.cost.settings)) == (6, 5)

    def test_every_field_settable(self):
        text = """
        [synth]
        transfer = 0.3, 0.3; 0.4, 0.4
        token_count = 2
        means = 0.0, 1.0
        [model]
        vocab_size = 2
        seq_len = 2
        attention_scaling = true
        adjacency_mode = factorized
        rank = 1
        [cost]
        settings = 64/128
        budget_bytes = 1e6
        """
        cfg = parse_config("\n".join(line.strip() for line in text.splitlines()))
        assert cfg.synth.transfer == ((0.3, 0.3), (0.4, 0.4))
        assert cfg.model.attention_scaling is True and cfg.model.rank == 1
        assert cfg.cost.settings == ((64, 128),) and cfg.cost.budget_bytes == 1e6
        again = parse_config(format_config(cfg))
        assert again == cfg

    @pytest.mark.parametrize("text,line,needle", [
        ("[model]\nhidden_dim = 8\nbogus = 1\n", 3, "unknown key 'bogus'"),
        ("[train]\n\nepochs = many\n", 3, "bad value for train.epochs"),
        ("[synth]\nsigma = 0.1\n[extra]\nx = 1\n", 3, "unknown section [extra]"),
        ("[model]\nseq_len = 9\n", 1, "invalid [model]"),
    ])
    def test_diagnostics_carry_line_numbers(self, text, line, needle):
        with pytest.raises(ConfigError) as info:
            parse_config(text, "exp.cfg")
        assert f"exp.cfg:{line}:" in str(info.value)
        assert needle in str(info.value)

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match=r"line\s+3"):
            parse_config("[train]\nepochs = 1\nepochs = 2\n")


class TestGen:
    def test_default_split_sizes(self, workdir):
        assert main(["gen", "--out", "d"]) == 0
        assert len(records(workdir / "d" / "train.txt")) == 14000
        assert len(records(workdir / "d" / "test.txt")) == 6000
        assert (workdir / "d" / "manifest.txt").exists()

    def test_regeneration_byte_identical(self, workdir):
        cfg = write(workdir / "c.cfg", SMALL)
        main(["gen", "--config", cfg, "--out", "a"])
        main(["gen", "--config", cfg, "--out", "b"])
        for name in ("train.txt", "test.txt"):
            assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()

    def test_seed_override(self, workdir):
        cfg = write(workdir / "c.cfg", SMALL)
        main(["gen", "--config", cfg, "--out", "a"])
        main(["gen", "--config", cfg, "--out", "b", "--seed", "7"])
        a, b = records(workdir / "a" / "train.txt"), records(workdir / "b" / "train.txt")
        assert a != b and len(a) == len(b)
        head = lambda p: [x.split("=")[0] for x in p.read_text().splitlines() if x.startswith("#")]
        assert head(workdir / "a" / "train.txt") == head(workdir / "b" / "train.txt")

    def test_env_seed_fallback(self, workdir, monkeypatch):
        cfg = write(workdir / "c.cfg", SMALL)
        main(["gen", "--config", cfg, "--out", "flag", "--seed", "5"])
        monkeypatch.setenv("POSFREE_SEED", "5")
        main(["gen", "--config", cfg, "--out", "env"])
        assert (workdir / "flag" / "train.txt").read_bytes() == (workdir / "env" / "train.txt").read_bytes()
        # an explicit seed in the file beats the environment
        pinned = write(workdir / "p.cfg", SMALL.replace("sample_count = 400", "sample_count = 400\nseed = 0"))
        main(["gen", "--config", pinned, "--out", "pinned"])
        main(["gen", "--config", cfg, "--out", "zero", "--seed", "0"])
        assert (workdir / "pinned" / "train.txt").read_bytes() == (workdir / "zero" / "train.txt").read_bytes()

    def test_malformed_config(self, workdir, capsys):
        cfg = write(workdir / "bad.cfg", "[synth]\nsigma = 0.1\nsigmaa = 0.2\n")
        assert main(["gen", "--config", cfg, "--out", "d"]) == 1
        assert "bad.cfg:3:" in capsys.readouterr().err
        assert not (workdir / "d").exists()

    def test_missing_config(self, workdir):
        assert main(["gen", "--config", "nope.cfg", "--out", "d"]) == 1


class TestTrain:
    @pytest.fixture
    def data(self, workdir):
        cfg = write(workdir / "c.cfg", SMALL)
        main(["gen", "--config", cfg, "--out", "d"])
        return cfg

    def test_outputs(self, workdir, data, capsys):
        assert main(["train", "--config", data, "--data", "d", "--out", "r", "--arch", "adjacency"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("best test loss: ")
        for name in ("report.csv", "report.meta.txt", "model.ckpt", "manifest.txt"):
            assert (workdir / "r" / name).exists()
        assert "model.architecture='adjacency'" in (workdir / "r" / "report.meta.txt").read_text()

    def test_zero_epochs(self, workdir, data, capsys):
        assert main(["train", "--config", data, "--data", "d", "--out", "r", "--epochs", "0"]) == 0
        assert "n/a" in capsys.readouterr().out
        assert (workdir / "r" / "report.csv").read_text() == "epoch,train_loss,test_loss\n"

    def test_repeat_identical(self, workdir, data):
        main(["train", "--config", data, "--data", "d", "--out", "r1"])
        main(["train", "--config", data, "--data", "d", "--out", "r2"])
        for name in ("report.csv", "report.meta.txt", "model.ckpt"):
            assert (workdir / "r1" / name).read_bytes() == (workdir / "r2" / name).read_bytes()

    def test_schema_mismatch(self, workdir, data, capsys):
        cfg = write(workdir / "m.cfg", SMALL + "[model]\nseq_len = 3\n")
        assert main(["train", "--config", cfg, "--data", "d", "--out", "r"]) == 2
        assert "seq_len: model 3, data 4" in capsys.readouterr().err

    def test_missing_data(self, workdir):
        assert main(["train", "--data", "nowhere", "--out", "r"]) == 2

    def test_bad_arch_is_usage_error(self, workdir):
        with pytest.raises(SystemExit) as info:
            main(["train", "--data", "d", "--arch", "mlp"])
        assert info.value.code == 1

    @pytest.mark.slow
    def test_default_attention_band(self, workdir, capsys):
        main(["gen", "--out", "d"])
        assert main(["train", "--data", "d", "--arch", "attention", "--out", "r"]) == 0
        line = next(x for x in capsys.readouterr().out.splitlines() if x.startswith("best test loss:"))
        best = float(line.split()[3])
        print(f"attention best test loss {best:.5f}")
        assert best <= 0.05


class TestSweep:
    def test_single_cell(self, workdir, capsys):
        cfg = write(workdir / "s.cfg", SMALL_SWEEP.replace("0.0, 0.5", "0.0"))
        assert main(["sweep", "--config", cfg, "--out", "s", "--workers", "1", "--quiet"]) == 0
        table = (workdir / "s" / "table1.txt").read_text().strip().splitlines()
        assert len(table) == 4  # header plus TF, GNN and r_delta rows
        assert "avg r_delta by e_p" in capsys.readouterr().out
        manifest = (workdir / "s" / "sweep_manifest.txt").read_text()
        for name in ("table1.txt", "table1.csv", "sweep_report.json", "curves_ep0_sigma0.1.csv"):
            assert (workdir / "s" / name).exists()
            assert f"artifact={name} " in manifest

    def test_worker_count_independent(self, workdir):
        cfg = write(workdir / "s.cfg", SMALL_SWEEP)
        main(["sweep", "--config", cfg, "--out", "w1", "--workers", "1", "--quiet"])
        main(["sweep", "--config", cfg, "--out", "w2", "--workers", "2", "--quiet"])
        for name in ("table1.csv", "table1.txt", "sweep_report.json", "curves_ep0.5_sigma0.1.csv"):
            assert (workdir / "w1" / name).read_bytes() == (workdir / "w2" / name).read_bytes()

    def test_partial_failure_exit(self, workdir, monkeypatch):
        real = sweep.train

        def flaky(model, data, cfg):
            if model.architecture == "adjacency":
                raise NumericError("non-finite loss")
            return real(model, data, cfg)

        monkeypatch.setattr(sweep, "train", flaky)
        cfg = write(workdir / "s.cfg", SMALL_SWEEP)
        assert main(["sweep", "--config", cfg, "--out", "s", "--workers", "1", "--quiet"]) == 4
        assert "--" in (workdir / "s" / "table1.txt").read_text()
        assert "error=NumericError" in (workdir / "s" / "sweep_manifest.txt").read_text()

    def test_report_command(self, workdir, capsys):
        cfg = write(workdir / "s.cfg", SMALL_SWEEP)
        main(["sweep", "--config", cfg, "--out", "s", "--workers", "1", "--quiet"])
        capsys.readouterr()
        assert main(["report", "s"]) == 0
        assert capsys.readouterr().out.splitlines()[0] == (workdir / "s" / "table1.txt").read_text().splitlines()[0]
        (workdir / "junk.json").write_text("{]")
        assert main(["report", "junk.json"]) == 2


class TestCost:
    def rows(self, path):
        return [line.split(",") for line in path.read_text().strip().splitlines()[1:]]

    def test_table2_configs(self, workdir):
        assert main(["cost", "--out", "c"]) == 0
        rows = self.rows(workdir / "c" / "cost_report.csv")
        assert len(rows) == 10
        for tf, gnn in zip(rows[::2], rows[1::2]):
            assert tf[0] == "attention" and gnn[0] == "adjacency"
            assert int(tf[4]) > int(gnn[4]) and int(tf[5]) > int(gnn[5])

    def test_single_config(self, workdir):
        cfg = write(workdir / "c.cfg", "[cost]\nsettings = 256/512\n")
        main(["cost", "--config", cfg, "--out", "c"])
        assert len(self.rows(workdir / "c" / "cost_report.csv")) == 2

    def test_length_sweep_monotone(self, workdir):
        cfg = write(workdir / "c.cfg", "[cost]\nsettings = 256/256, 256/512, 256/1024\nbudget_bytes = 1e8\n")
        main(["cost", "--config", cfg, "--out", "c"])
        rows = self.rows(workdir / "c" / "cost_report.csv")
        for arch in ("attention", "adjacency"):
            mem = [int(r[5]) for r in rows if r[0] == arch]
            assert mem == sorted(mem) and len(mem) == 3
        manifest = (workdir / "c" / "manifest.txt").read_text()
        assert "budget_crossing.d256.attention=512" in manifest
        assert "budget_crossing.d256.adjacency=None" in manifest


def test_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "posfree.cli", "cost", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("arch,layers,d,l,flops,mem_bytes,params")
