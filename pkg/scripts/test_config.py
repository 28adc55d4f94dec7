#!/usr/bin/env python3
"""
Test script for the training configuration and config file handling
"""

import os
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import OUTPUT_ROOT_ENV, TrainConfig, output_root, read_config_file, resolve_config, write_config_file
from errors import ConfigError
from synthdata import DatasetSpec


def _write(text: str) -> str:
    handle = tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False)
    handle.write(text)
    handle.close()
    return handle.name


def test_defaults():
    cfg, spec = resolve_config()
    assert cfg == TrainConfig()
    assert spec == DatasetSpec()
    assert cfg.alpha == 0.6 and cfg.beta_prime == 0.6 and cfg.gamma == 0.9 and cfg.base_lr == 0.01
    assert cfg.uda_mode == "multihead" and cfg.assign_mode == "mask"


def test_file_over_defaults():
    path = _write("[train]\nalpha = 0.5\nepochs = 3\nuse_cps_t = false\nrefine_dilations = 1,2\n"
                  "[data]\nnum_train = 12\n")
    try:
        cfg, spec = resolve_config(path)
    finally:
        os.unlink(path)
    assert cfg.alpha == 0.5 and cfg.epochs == 3 and cfg.use_cps_t is False
    assert cfg.refine_dilations == (1, 2)
    assert spec.num_train == 12 and spec.num_val == DatasetSpec().num_val


def test_flags_over_file():
    path = _write("[train]\nalpha = 0.5\nbatch_size = 4\n")
    try:
        cfg, _ = resolve_config(path, train_overrides={"alpha": 0.7}, data_overrides={"seed": 9})
    finally:
        os.unlink(path)
    assert cfg.alpha == 0.7
    assert cfg.batch_size == 4


def test_unknown_key():
    path = _write("[train]\nalpah = 0.5\n")
    try:
        read_config_file(path)
    except ConfigError as e:
        assert e.field == "alpah"
        return
    finally:
        os.unlink(path)
    raise AssertionError("unknown key accepted")


def test_unknown_section():
    path = _write("[model]\nwidth = 3\n")
    try:
        read_config_file(path)
    except ConfigError as e:
        assert e.field == "model"
        return
    finally:
        os.unlink(path)
    raise AssertionError("unknown section accepted")


def test_unparseable_value():
    try:
        resolve_config(train_overrides={"epochs": "many"})
    except ConfigError as e:
        assert e.field == "epochs"
        return
    raise AssertionError("bad integer accepted")


def test_missing_file():
    try:
        read_config_file("/nonexistent/plda.ini")
    except ConfigError:
        return
    raise AssertionError("missing config file accepted")


def test_validation_names_field():
    cases = [
        ({"alpha": 1.0}, "alpha"),
        ({"beta_prime": 0.0}, "beta_prime"),
        ({"epochs": 0}, "epochs"),
        ({"grl_lambda": -1.0}, "grl_lambda"),
        ({"gamma": 0.0}, "gamma"),
        ({"uda_mode": "pixel"}, "uda_mode"),
        ({"assign_mode": "simple", "simple_alpha_lo": 0.7}, "simple_alpha_lo"),
        ({"device": "tpu"}, "device"),
    ]
    for overrides, field in cases:
        try:
            resolve_config(train_overrides=overrides)
        except ConfigError as e:
            assert e.field == field, (e.field, field)
            continue
        raise AssertionError(f"{overrides} accepted")


def test_write_read_round_trip():
    cfg = TrainConfig(alpha=0.45, grl_warmup=True, refine_dilations=(1, 3), uda_mode="global", seed=4)
    spec = DatasetSpec(num_train=40, image_size=32, seed=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "run.ini")
        write_config_file(path, cfg, spec)
        got_cfg, got_spec = resolve_config(path)
    assert got_cfg == cfg
    assert got_spec == spec


def test_dict_round_trip():
    cfg = TrainConfig(refine_dilations=(2, 4), use_uda=False)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_output_root():
    previous = os.environ.pop(OUTPUT_ROOT_ENV, None)
    try:
        assert output_root() == Path("./runs")
        os.environ[OUTPUT_ROOT_ENV] = "/tmp/plda-env"
        assert output_root() == Path("/tmp/plda-env")
        assert output_root("elsewhere") == Path("elsewhere")
    finally:
        os.environ.pop(OUTPUT_ROOT_ENV, None)
        if previous is not None:
            os.environ[OUTPUT_ROOT_ENV] = previous


TESTS = [
    test_defaults,
    test_file_over_defaults,
    test_flags_over_file,
    test_unknown_key,
    test_unknown_section,
    test_unparseable_value,
    test_missing_file,
    test_validation_names_field,
    test_write_read_round_trip,
    test_dict_round_trip,
    test_output_root,
]


def main():
    print("🧪 Configuration Tests")
    print("=" * 30)
    failed = 0
    for test in TESTS:
        try:
            test()
            print(f"✓ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"✗ {test.__name__}: {type(e).__name__}: {e}")
    print(f"\n{len(TESTS) - failed}/{len(TESTS)} passed")
    return failed == 0


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
