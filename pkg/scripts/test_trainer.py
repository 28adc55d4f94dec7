#!/usr/bin/env python3
"""
Test script for the training loop: learning rate schedule, loss assembly,
gradient routing through the reversal layer, determinism and checkpoints
"""

import copy
import dataclasses
import math
import os
import random
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import TrainConfig
from errors import ConfigError, DatasetError, NonFiniteLossError
from synthdata import DatasetSpec, generate_dataset
from trainer import (CHECKPOINT_FILE, METRICS_FILE, LossBundle, build_model, collect_cams, compute_losses,
                     evaluate_cam_miou, load_model, poly_lr, read_metrics, similarity_report, stack_batch,
                     steps_per_epoch, train)

TINY = TrainConfig(epochs=1, batch_size=2, feature_dim=8, refine_iterations=2, refine_dilations=(1, 2), seed=0)


def _data(num_train=4, num_val=2, image_size=32, seed=0):
    return generate_dataset(DatasetSpec(num_train=num_train, num_val=num_val, image_size=image_size, seed=seed))


def _batch(samples, dtype=torch.float64):
    images, labels = stack_batch(samples)
    return images.to(dtype), labels.to(dtype)


def _active_model(cfg: TrainConfig):
    """float64 eval-mode model whose CAMs fire on every present class"""
    model = build_model(3, cfg).double().eval()
    with torch.no_grad():
        model.head.weight.abs_()
    return model


def test_poly_lr_values():
    assert math.isclose(poly_lr(0, 100, 0.01, 0.9), 0.01)
    assert poly_lr(100, 100, 0.01, 0.9) == 0.0
    assert math.isclose(poly_lr(50, 100, 0.01, 0.9), 0.01 * 0.5 ** 0.9)
    values = [poly_lr(t, 40, 0.01, 0.9) for t in range(41)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_poly_lr_range():
    for t, total in ((101, 100), (-1, 100), (0, 0)):
        try:
            poly_lr(t, total, 0.01, 0.9)
        except ConfigError:
            continue
        raise AssertionError(f"poly_lr({t}, {total}) accepted")
    try:
        poly_lr(100, 100, 0.01, 0.0)
    except ConfigError as e:
        assert e.field == "gamma"
    else:
        raise AssertionError("gamma 0 accepted")


def test_steps_per_epoch():
    assert steps_per_epoch(4, 2) == 2
    assert steps_per_epoch(5, 2) == 3
    assert steps_per_epoch(1, 8) == 1


def test_bundle_total_is_sum():
    bundle = LossBundle(torch.tensor(0.5), torch.tensor(0.25), torch.tensor(1.0), torch.tensor(2.0))
    assert float(bundle.total) == 3.75
    assert bundle.as_floats() == {"cls": 0.5, "uda": 0.25, "cps_s": 1.0, "cps_t": 2.0, "total": 3.75}


def test_compute_losses_terms():
    train_set, _ = _data()
    model = _active_model(TINY)
    images, labels = _batch(train_set[:2])
    bundle = compute_losses(model, images, labels, TINY)
    for name in ("cls", "uda", "cps_s", "cps_t"):
        value = getattr(bundle, name)
        assert bool(torch.isfinite(value)) and float(value) >= 0.0, name
    assert math.isclose(float(bundle.total), sum(float(getattr(bundle, n)) for n in ("cls", "uda", "cps_s", "cps_t")))
    assert bundle.num_source > 0


def test_switches_off_is_classification_only():
    train_set, _ = _data()
    cfg = dataclasses.replace(TINY, use_uda=False, use_cps_s=False, use_cps_t=False)
    model = build_model(3, cfg).double().eval()
    images, labels = _batch(train_set[:2])
    bundle = compute_losses(model, images, labels, cfg)
    assert float(bundle.uda) == 0.0 and float(bundle.cps_s) == 0.0 and float(bundle.cps_t) == 0.0
    assert torch.equal(bundle.total, bundle.cls)
    bundle.total.backward()
    assert all(p.grad is None for p in model.domain.parameters())
    assert model.head.weight.grad is not None


def test_each_switch_removes_one_term():
    train_set, _ = _data()
    images, labels = _batch(train_set[:2])
    model = _active_model(TINY)
    full = compute_losses(model, images, labels, TINY).as_floats()
    for switch, term in (("use_uda", "uda"), ("use_cps_s", "cps_s"), ("use_cps_t", "cps_t")):
        cfg = dataclasses.replace(TINY, **{switch: False})
        model.zero_grad(set_to_none=True)
        bundle = compute_losses(model, images, labels, cfg)
        got = bundle.as_floats()
        assert got[term] == 0.0 and not getattr(bundle, term).requires_grad, switch
        for other in ("cls", "uda", "cps_s", "cps_t"):
            if other != term:
                assert math.isclose(got[other], full[other], rel_tol=1e-12), (switch, other)
        bundle.total.backward()
        if term == "uda":
            assert all(p.grad is None for p in model.domain.parameters())


def test_masked_pass_carries_no_gradient():
    """Gradients match a run where the masked forward is replaced by cached constants"""
    train_set, _ = _data()
    images, labels = _batch(train_set[:2])
    model = _active_model(TINY)
    real_forward = model.forward
    outputs = []

    def recording(*args):
        outputs.append(real_forward(*args))
        return outputs[-1]

    model.forward = recording
    compute_losses(model, images, labels, TINY).total.backward()
    live = {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}
    z_masked, masked_cam = outputs[1]
    cached = (z_masked.detach(), masked_cam.detach())

    calls = []

    def replaying(*args):
        calls.append(args)
        return real_forward(*args) if len(calls) == 1 else cached

    model.forward = replaying
    model.zero_grad(set_to_none=True)
    compute_losses(model, images, labels, TINY).total.backward()
    replayed = {n: p.grad for n, p in model.named_parameters() if p.grad is not None}
    assert set(live) == set(replayed)
    for name in live:
        assert torch.equal(live[name], replayed[name]), name


def test_masked_pass_keeps_norm_buffers():
    train_set, _ = _data()
    images, labels = _batch(train_set[:2])
    num_classes = labels.shape[1]
    plain_cfg = dataclasses.replace(TINY, use_uda=False, use_cps_s=False, use_cps_t=False)
    for target_features in ("original", "masked"):
        cfg = dataclasses.replace(TINY, target_features=target_features)
        full = build_model(num_classes, cfg).double().train()
        plain = copy.deepcopy(full)
        compute_losses(full, images, labels, cfg)
        compute_losses(plain, images, labels, plain_cfg)
        for (name, got), (_, expected) in zip(full.named_buffers(), plain.named_buffers()):
            assert torch.equal(got, expected), (target_features, name)
        tracked = dict(full.named_buffers())["backbone.blocks.0.bn.num_batches_tracked"]
        assert int(tracked) == 1


def test_zero_lambda_isolates_backbone():
    train_set, _ = _data()
    images, labels = _batch(train_set[:2])
    cfg = dataclasses.replace(TINY, grl_lambda=0.0, use_cps_s=False, use_cps_t=False)
    cls_only = dataclasses.replace(cfg, use_uda=False)

    model = _active_model(cfg)
    compute_losses(model, images, labels, cls_only).total.backward()
    reference = {n: p.grad.clone() for n, p in model.backbone.named_parameters()}
    model.zero_grad(set_to_none=True)

    bundle = compute_losses(model, images, labels, cfg)
    assert float(bundle.uda) > 0.0
    bundle.total.backward()
    for name, param in model.backbone.named_parameters():
        assert torch.allclose(param.grad, reference[name], rtol=1e-12, atol=1e-15), name
    domain_grad = sum(float(p.grad.abs().sum()) for p in model.domain.parameters() if p.grad is not None)
    assert domain_grad > 0.0


def test_gradients_match_finite_differences():
    """Backbone follows the reversed objective, head and domain classifier the plain one"""
    train_set, _ = _data(num_train=2, num_val=0)
    model = _active_model(TINY)
    images, labels = _batch(train_set)

    def objective(reversed_side: bool) -> float:
        bundle = compute_losses(model, images, labels, TINY)
        if reversed_side:
            return float(bundle.cls + bundle.cps_s + bundle.cps_t - TINY.grl_lambda * bundle.uda)
        return float(bundle.total)

    model.zero_grad(set_to_none=True)
    compute_losses(model, images, labels, TINY).total.backward()

    params = dict(model.named_parameters())
    picks = ["backbone.blocks.0.conv.weight", "backbone.blocks.3.conv.weight", "backbone.blocks.3.bn.weight",
             "head.weight", "domain.base.0.weight"]
    rng = random.Random(0)
    eps = 1e-6
    for name in picks:
        param = params[name]
        i = rng.randrange(param.numel())
        analytic = float(param.grad.reshape(-1)[i]) if param.grad is not None else 0.0
        reversed_side = name.startswith("backbone.")
        with torch.no_grad():
            original = float(param.reshape(-1)[i])
            param.view(-1)[i] = original + eps
            upper = objective(reversed_side)
            param.view(-1)[i] = original - eps
            lower = objective(reversed_side)
            param.view(-1)[i] = original
        numeric = (upper - lower) / (2 * eps)
        scale = max(abs(numeric), abs(analytic))
        assert abs(analytic - numeric) <= 1e-3 * scale + 1e-7, (name, analytic, numeric)


def test_nonfinite_loss_raises():
    train_set, _ = _data()
    cfg = dataclasses.replace(TINY, use_uda=False, use_cps_s=False, use_cps_t=False)
    model = build_model(3, cfg).double().eval()
    with torch.no_grad():
        model.head.weight.fill_(float("nan"))
    try:
        compute_losses(model, *_batch(train_set[:2]), cfg, step=7)
    except NonFiniteLossError as e:
        assert e.component == "cls" and e.step == 7
        return
    raise AssertionError("NaN loss accepted")


def test_empty_training_set():
    try:
        train([], [], TINY)
    except DatasetError:
        return
    raise AssertionError("empty training set accepted")


def test_train_records_and_outputs():
    train_set, val_set = _data(num_train=5)
    with tempfile.TemporaryDirectory() as tmp:
        seen = []
        model, records = train(train_set, val_set, TINY, out_dir=tmp, on_epoch=seen.append)
        assert len(records) == 1 and seen == records
        record = records[0]
        assert record["steps"] == 3
        assert record["epoch"] == 0 and math.isclose(record["lr"], TINY.base_lr)
        assert 0.0 <= record["val_miou"] <= 1.0
        assert read_metrics(Path(tmp) / METRICS_FILE) == records

        loaded, cfg = load_model(Path(tmp) / CHECKPOINT_FILE)
        assert cfg == TINY
        for (name, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a.cpu(), b), name
        for a, b in zip(collect_cams(model, val_set), collect_cams(loaded, val_set)):
            assert np.array_equal(a, b)


def test_train_without_validation():
    train_set, _ = _data(num_train=2, num_val=0)
    _, records = train(train_set, [], TINY)
    assert records[0]["val_miou"] is None and records[0]["val_threshold"] is None


def test_same_seed_same_run():
    train_set, val_set = _data()
    cfg = dataclasses.replace(TINY, epochs=2)
    _, first = train(train_set, val_set, cfg)
    _, second = train(train_set, val_set, cfg)
    assert first == second


def test_evaluate_cam_miou():
    _, val_set = _data(num_val=3)
    model = build_model(3, TINY)
    result = evaluate_cam_miou(model, val_set, grid=[0.2, 0.5, 0.8])
    assert result.best_threshold in (0.2, 0.5, 0.8)
    assert [tau for tau, _ in result.curve] == [0.2, 0.5, 0.8]
    assert result.best_report.mean == max(m for _, m in result.curve)
    try:
        evaluate_cam_miou(model, [])
    except DatasetError:
        return
    raise AssertionError("empty evaluation set accepted")


def test_similarity_report_on_parts():
    _, val_set = _data(num_train=1, num_val=4, image_size=64)
    model = build_model(3, TINY)
    report = similarity_report(model, val_set, TINY, regions="parts", samples_per_class=8)
    assert math.isclose(float(report.source_hist.sum()), 1.0)
    assert math.isclose(float(report.target_hist.sum()), 1.0)
    assert all(1 <= n <= 8 for n in report.samples_per_class.values())
    try:
        similarity_report(model, val_set, TINY, regions="edges")
    except ConfigError:
        return
    raise AssertionError("unknown region mode accepted")


TESTS = [
    test_poly_lr_values,
    test_poly_lr_range,
    test_steps_per_epoch,
    test_bundle_total_is_sum,
    test_compute_losses_terms,
    test_switches_off_is_classification_only,
    test_each_switch_removes_one_term,
    test_masked_pass_carries_no_gradient,
    test_masked_pass_keeps_norm_buffers,
    test_zero_lambda_isolates_backbone,
    test_gradients_match_finite_differences,
    test_nonfinite_loss_raises,
    test_empty_training_set,
    test_train_records_and_outputs,
    test_train_without_validation,
    test_same_seed_same_run,
    test_evaluate_cam_miou,
    test_similarity_report_on_parts,
]


def main():
    print("🧪 Training Loop Tests")
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
