"""Operator-surface tests: config validation, commands, file emission."""

import json
import struct

import numpy as np
import pytest

from fedroad.cli import (
    CSV_HEADER,
    ExperimentConfig,
    main,
    parse_config,
    resolve_config,
    serialize_config,
)
from fedroad.errors import ConfigError
from fedroad.privacy import deserialize_privatized


def write_cfg(tmp_path, name="cfg.json", **overrides):
    base = {
        "run_id": "t",
        "seed": 11,
        "out_dir": str(tmp_path / "out"),
        "federation": {
            "strategy": "mfed",
            "rounds": 2,
            "local_epochs": 1,
            "new_data_threshold": 0,
        },
        "dataset": {
            "kind": "synthetic",
            "classes": 3,
            "per_class": 18,
            "test_per_class": 9,
            "image_dim": 6,
            "vocab": 24,
            "text_len": 5,
        },
        "partition": {"scheme": "even"},
        "model": {"type": "mlp", "hidden": 16},
    }
    for key, val in overrides.items():
        if isinstance(val, dict):
            base.setdefault(key, {}).update(val)
        else:
            base[key] = val
    path = tmp_path / name
    path.write_text(json.dumps(base))
    return path


class TestConfig:
    def test_minimal_file_gets_reference_defaults(self, tmp_path):
        path = tmp_path / "min.json"
        path.write_text(json.dumps({"federation": {"strategy": "mfed"}}))
        cfg = parse_config(path)
        fed = cfg["federation"]
        assert fed["n_clients"] == 3
        assert fed["local_epochs"] == 10
        assert fed["rounds"] == 50
        assert fed["gamma0"] == 0.1
        assert fed["new_data_threshold"] == 100

    def test_unknown_strategy_names_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"federation": {"strategy": "mfedX"}}))
        with pytest.raises(ConfigError, match="strategy"):
            parse_config(path)

    def test_unknown_key_rejected_with_path(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"federation": {"stragglers": 2}}))
        with pytest.raises(ConfigError, match="federation.stragglers"):
            parse_config(path)
        path.write_text(json.dumps({"bogus_section": {}}))
        with pytest.raises(ConfigError, match="bogus_section"):
            parse_config(path)

    def test_type_mismatch_names_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"federation": {"rounds": "fifty"}}))
        with pytest.raises(ConfigError, match="federation.rounds"):
            parse_config(path)

    def test_roundtrip(self, tmp_path):
        path = write_cfg(tmp_path)
        cfg = parse_config(path)
        path2 = tmp_path / "echo.json"
        path2.write_text(serialize_config(cfg))
        assert parse_config(path2) == cfg

    def test_constraint_violation_surfaces(self, tmp_path):
        path = write_cfg(tmp_path, federation={"gamma0": -1.0})
        with pytest.raises(ConfigError):
            parse_config(path)


class TestRun:
    def test_determinism_byte_identical(self, tmp_path):
        path = write_cfg(tmp_path)
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b
        assert a.decode().splitlines()[0] == CSV_HEADER

    def test_refuses_populated_out_dir(self, tmp_path):
        path = write_cfg(tmp_path)
        out = tmp_path / "out"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        assert main(["run", "--config", str(path)]) == 2
        assert main(["run", "--config", str(path), "--force"]) == 0

    def test_mfed_cheaper_than_fedavg(self, tmp_path):
        path_m = write_cfg(tmp_path, name="m.json", federation={"strategy": "mfed"})
        path_f = write_cfg(tmp_path, name="f.json", federation={"strategy": "fedavg"})
        assert main(["run", "--config", str(path_m), "--out", str(tmp_path / "m")]) == 0
        assert main(["run", "--config", str(path_f), "--out", str(tmp_path / "f")]) == 0

        def final_cum(p):
            lines = (p / "metrics.csv").read_text().strip().splitlines()[1:]
            return int(lines[-1].split(",")[8])

        assert final_cum(tmp_path / "m") < final_cum(tmp_path / "f")

    def test_writes_config_echo_and_checkpoint(self, tmp_path):
        path = write_cfg(tmp_path)
        assert main(["run", "--config", str(path)]) == 0
        out = tmp_path / "out"
        echoed = parse_config(out / "config.json")
        assert echoed["federation"]["strategy"] == "mfed"
        assert (out / "checkpoint.bin").exists()

    def test_seed_override_changes_metrics(self, tmp_path):
        path = write_cfg(tmp_path)
        main(["run", "--config", str(path), "--out", str(tmp_path / "s1"), "--seed", "1"])
        main(["run", "--config", str(path), "--out", str(tmp_path / "s2"), "--seed", "2"])
        a = (tmp_path / "s1" / "metrics.csv").read_text()
        b = (tmp_path / "s2" / "metrics.csv").read_text()
        assert a != b


class TestPrivatize:
    def test_report_and_reproducibility(self, tmp_path):
        path = write_cfg(
            tmp_path,
            dataset={"image_dim": 16},
            privacy={"enabled": True, "epsilon": 0.8, "c": 4, "e": 4},
        )
        out1, out2 = tmp_path / "p1", tmp_path / "p2"
        assert main(["privatize", "--config", str(path), "--out", str(out1)]) == 0
        assert main(["privatize", "--config", str(path), "--out", str(out2)]) == 0
        report = json.loads((out1 / "budget_report.json").read_text())
        assert report["image_noise_scale"] == 2 * 16 / 0.8
        assert report["records"] == 3 * 18
        assert (out1 / "privatized.bin").read_bytes() == (out2 / "privatized.bin").read_bytes()

    def test_output_parses_and_counts(self, tmp_path):
        path = write_cfg(
            tmp_path, privacy={"enabled": True, "epsilon": 1.0, "c": 3, "e": 3}
        )
        out = tmp_path / "p"
        assert main(["privatize", "--config", str(path), "--out", str(out)]) == 0
        blob = (out / "privatized.bin").read_bytes()
        (count,) = struct.unpack_from("<I", blob, 0)
        assert count == 3 * 18
        off = 4
        seen = 0
        while off < len(blob):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            rec = deserialize_privatized(blob[off : off + n])
            assert rec.image_feature.shape == (3, 3)
            off += n
            seen += 1
        assert seen == count

    def test_bad_epsilon_rejected(self, tmp_path):
        path = write_cfg(tmp_path, privacy={"enabled": True, "epsilon": -1.0})
        assert main(["privatize", "--config", str(path), "--out", str(tmp_path / "p")]) == 2


class TestPretrainEval:
    def test_pretrain_writes_trace_and_checkpoint(self, tmp_path):
        path = write_cfg(
            tmp_path,
            model={"type": "multimodal", "embed_dim": 6, "text_hidden": 6,
                   "image_hidden": 6, "fusion_hidden": 6},
            pretrain={"enabled": True, "epochs": 2, "lr": 0.3},
        )
        assert main(["pretrain", "--config", str(path)]) == 0
        out = tmp_path / "out"
        assert (out / "encoders.bin").exists()
        lines = (out / "loss_trace.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,loss"
        assert len(lines) == 3

    def run_and_eval(self, tmp_path, capsys):
        # easy two-class problem the MLP drives to 100%
        path = write_cfg(
            tmp_path,
            dataset={"classes": 2, "per_class": 24, "test_per_class": 12,
                     "noise_sigma": 0.05, "antipodal": True},
            federation={"strategy": "fedavg", "rounds": 4, "local_epochs": 4,
                        "new_data_threshold": 0, "gamma0": 0.3},
        )
        assert main(["run", "--config", str(path)]) == 0
        out = tmp_path / "out"
        code = main(
            ["eval", "--config", str(path), "--checkpoint", str(out / "checkpoint.bin")]
        )
        captured = capsys.readouterr().out
        assert code == 0
        return {
            line.split()[0]: float(line.split()[1])
            for line in captured.strip().splitlines()[-4:]
        }

    def test_eval_perfect_fit_and_f1_definition(self, tmp_path, capsys):
        got = self.run_and_eval(tmp_path, capsys)
        assert got["accuracy"] == 1.0
        assert got["precision"] == 1.0
        assert got["recall"] == 1.0
        assert got["f1"] == 1.0
        p, r = got["precision"], got["recall"]
        assert abs(got["f1"] - 2 * p * r / (p + r)) < 1e-9

    def test_eval_is_idempotent(self, tmp_path, capsys):
        first = self.run_and_eval(tmp_path, capsys)
        path = tmp_path / "cfg.json"
        out = tmp_path / "out"
        main(["eval", "--config", str(path), "--checkpoint", str(out / "checkpoint.bin")])
        second = {
            line.split()[0]: float(line.split()[1])
            for line in capsys.readouterr().out.strip().splitlines()[-4:]
        }
        assert first == second

    def test_missing_checkpoint_fails(self, tmp_path):
        path = write_cfg(tmp_path)
        assert main(["eval", "--config", str(path), "--checkpoint", "/nope.bin"]) == 1


class TestPartition:
    def test_writes_plan(self, tmp_path):
        path = write_cfg(tmp_path, partition={"scheme": "class_restricted",
                                              "classes_per_client": 2})
        assert main(["partition", "--config", str(path)]) == 0
        doc = json.loads((tmp_path / "out" / "partition.json").read_text())
        assert doc["scheme"] == "class_restricted"
        assert set(doc["assignments"]) == {"0", "1", "2"}


class TestMetricsCsvShape:
    def test_schema_stable_and_lr_column(self, tmp_path):
        path = write_cfg(tmp_path, federation={"strategy": "lrdecay", "rounds": 3,
                                               "gamma0": 0.1})
        assert main(["run", "--config", str(path)]) == 0
        lines = (tmp_path / "out" / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 4
        lrs = [float(l.split(",")[3]) for l in lines[1:]]
        assert lrs == [0.1, 0.05, 0.025]
        rounds = [int(l.split(",")[2]) for l in lines[1:]]
        assert rounds == [0, 1, 2]
