import csv

import pytest
import yaml

from vvca.cli import RunConfig, load_config, main, print_config_defaults, ConfigError
from vvca.domain import AuctionSize, load_batch


def write_config(tmp_path, **values):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(values))
    return str(path)


class TestConfig:
    def test_defaults_table(self):
        text = print_config_defaults("A", AuctionSize(2, 2))
        data = yaml.safe_load(text)
        assert (data["lr"], data["sigma"], data["batch_size"]) == (0.01, 0.01, 1024)
        assert data["n_r"] == 8 and data["iterations"] == 2000
        assert "fallback" not in text

    def test_large_table_entry(self):
        data = yaml.safe_load(print_config_defaults("A", AuctionSize(5, 10)))
        assert (data["lr"], data["sigma"], data["batch_size"]) == (0.0003, 0.001, 1024)

    def test_fallback_flagged(self):
        text = print_config_defaults("A", AuctionSize(7, 3))
        assert text.startswith("# fallback")
        data = yaml.safe_load(text)
        assert (data["lr"], data["sigma"]) == (0.001, 0.01)

    @pytest.mark.parametrize("setting,n,m", [("A", 2, 2), ("B", 5, 3), ("C", 4, 4)])
    def test_round_trip(self, tmp_path, setting, n, m):
        path = tmp_path / "d.yaml"
        path.write_text(print_config_defaults(setting, AuctionSize(n, m)))
        back = load_config(str(path))
        direct = RunConfig(setting=setting, n=n, m=m).resolved()
        assert back == direct
        assert back.train_config() == direct.train_config()

    def test_overrides(self, tmp_path):
        cfg = load_config(write_config(tmp_path, setting="b", n=3, m=2, lr=0.5),
                          ["iterations=7", "sigma=0.2"], seed=9)
        assert (cfg.setting, cfg.lr, cfg.iterations, cfg.sigma, cfg.seed) == \
            ("B", 0.5, 7, 0.2, 9)

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, setting="A", learning_rate=0.1))
        with pytest.raises(ConfigError):
            load_config(None, ["colour=blue"])

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            load_config(None, ["n=two"])
        with pytest.raises(ConfigError):
            load_config(None, ["n"])
        with pytest.raises(ConfigError):
            load_config(None, ["setting=E"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "nope.yaml"))


class TestMain:
    def test_evaluate_vcg(self, tmp_path, capsys):
        code = main(["evaluate", "--method", "vcg", "--set", "runs=1",
                     "--set", f"output_dir={tmp_path}"])
        assert code == 0
        mean = float(capsys.readouterr().out.split("mean ")[-1].split()[0])
        assert abs(mean - 2 / 3) < 0.01

    def test_train_writes_runs(self, tmp_path, capsys):
        cfg = write_config(tmp_path, setting="A", n=2, m=2, method="FO_VVCA", iterations=3,
                           batch_size=32, eval_size=256, runs=2, output_dir=str(tmp_path))
        assert main(["train", "--config", cfg, "--seed", "4"]) == 0
        assert (tmp_path / "fo_vvca_2x2A" / "run_1" / "curve.csv").exists()
        assert "seed 5" in capsys.readouterr().out

    def test_evaluate_params_file(self, tmp_path, capsys):
        main(["train", "--set", "iterations=2", "--set", "batch_size=16", "--set", "runs=1",
              "--set", "eval_size=64", "--set", f"output_dir={tmp_path}"])
        params = tmp_path / "od_vvca_2x2A" / "run_0" / "params.json"
        assert main(["evaluate", "--params", str(params), "--set", "eval_size=1000"]) == 0
        assert "revenue" in capsys.readouterr().out
        assert main(["evaluate", "--params", str(params), "--set", "n=3"]) == 2

    def test_sample(self, tmp_path, capsys):
        assert main(["sample", "--count", "10", "--set", f"output_dir={tmp_path}",
                     "--set", "setting=D"]) == 0
        path = capsys.readouterr().out.strip()
        assert len(load_batch(path)) == 10

    def test_grid_and_sweep(self, tmp_path, capsys):
        out = f"output_dir={tmp_path}"
        assert main(["grid", "--grid-n", "3", "--profiles", "16", "--set", out]) == 0
        grid_path = capsys.readouterr().out.strip()
        with open(grid_path) as fh:
            assert len(list(csv.reader(fh))) == 10
        assert main(["sweep", "--range=-0.1:0.1:3", "--directions", "4",
                     "--profiles", "16", "--set", out]) == 0
        assert capsys.readouterr().out.strip().endswith(".csv")
        assert main(["grid", "--set", "n=3", "--set", out]) == 2

    def test_verify(self, capsys):
        assert main(["verify", "--scale", "quick"]) == 0
        assert "all checks passed" in capsys.readouterr().out

    def test_usage_errors(self, capsys):
        assert main([]) == 2
        assert main(["train", "--method", "vcg"]) == 2
        assert main(["evaluate", "--method", "item_myerson", "--set", "setting=D"]) == 2
        assert main(["train", "--config", "/nonexistent.yaml"]) == 2
        assert main(["defaults", "--set", "bogus=1"]) == 2

    def test_defaults_command(self, capsys):
        assert main(["defaults", "--set", "n=5", "--set", "m=10"]) == 0
        assert "lr: 0.0003" in capsys.readouterr().out
