#!/usr/bin/env python3
"""
Test script for image erasure and source/target pixel assignment
"""

import os
import sys

import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from assign import activation_union, mask_assign, mask_image, simple_assign
from errors import ConfigError, ShapeError
from netcore import CamMap


def _cam(normalized: torch.Tensor) -> CamMap:
    return CamMap(raw=normalized.clone(), normalized=normalized)


def _reference_admitted(normalized, alpha, label):
    """Per-pixel loop: (flat index, argmax present class) for pixels above alpha"""
    c, h, w = normalized.shape
    present = [k for k in range(c) if label[k] > 0]
    out = []
    for y in range(h):
        for x in range(w):
            values = [float(normalized[k, y, x]) for k in present]
            if present and max(values) > alpha:
                best = present[values.index(max(values))]
                out.append((y * w + x, best))
    return out


def test_mask_image_below_alpha_unchanged():
    image = torch.rand(3, 16, 16)
    cam = _cam(torch.full((2, 4, 4), 0.5))
    assert torch.equal(mask_image(image, cam, 0.6, torch.tensor([1.0, 1.0])), image)


def test_mask_image_all_above():
    image = torch.rand(3, 16, 16)
    cam = _cam(torch.full((2, 4, 4), 0.9))
    assert torch.equal(mask_image(image, cam, 0.6, torch.tensor([0.0, 1.0])), torch.zeros(3, 16, 16))


def test_mask_image_hand_blocks():
    normalized = torch.zeros(1, 4, 4)
    hot = [(0, 1), (2, 2), (3, 0)]
    for y, x in hot:
        normalized[0, y, x] = 0.8
    normalized[0, 1, 1] = 0.6  # not strictly above alpha
    image = torch.rand(3, 16, 16) + 0.1
    out = mask_image(image, _cam(normalized), 0.6, torch.tensor([1.0]))
    for y in range(4):
        for x in range(4):
            block = out[:, 4 * y:4 * y + 4, 4 * x:4 * x + 4]
            if (y, x) in hot:
                assert torch.equal(block, torch.zeros_like(block))
            else:
                assert torch.equal(block, image[:, 4 * y:4 * y + 4, 4 * x:4 * x + 4])


def test_mask_image_ignores_absent_classes():
    image = torch.rand(3, 8, 8)
    normalized = torch.stack([torch.zeros(2, 2), torch.ones(2, 2)])
    assert torch.equal(mask_image(image, _cam(normalized), 0.6, torch.tensor([1.0, 0.0])), image)


def test_mask_image_batched():
    image = torch.rand(2, 3, 8, 8)
    normalized = torch.zeros(2, 1, 2, 2)
    normalized[1, 0, 0, 0] = 1.0
    out = mask_image(image, _cam(normalized), 0.6, torch.ones(2, 1))
    assert torch.equal(out[0], image[0])
    assert torch.equal(out[1, :, :4, :4], torch.zeros(3, 4, 4))
    assert torch.equal(out[1, :, 4:, :], image[1, :, 4:, :])


def test_mask_image_errors():
    cam = _cam(torch.rand(1, 4, 4))
    for alpha in (0.0, 1.0, -0.2):
        try:
            mask_image(torch.rand(3, 16, 16), cam, alpha, torch.tensor([1.0]))
        except ConfigError as e:
            assert e.field == "alpha"
            continue
        raise AssertionError(f"alpha {alpha} accepted")
    try:
        mask_image(torch.rand(3, 14, 16), cam, 0.6, torch.tensor([1.0]))
    except ShapeError:
        return
    raise AssertionError("non-tiling CAM accepted")


def test_mask_assign_empty_target():
    cam = _cam(torch.rand(2, 4, 4))
    assignment = mask_assign(cam, _cam(torch.zeros(2, 4, 4)), 0.6, torch.tensor([1.0, 1.0]))
    assert assignment.num_target == 0


def test_mask_assign_keeps_overlap():
    normalized = torch.zeros(2, 3, 3)
    normalized[1, 1, 2] = 0.9
    cam = _cam(normalized)
    assignment = mask_assign(cam, _cam(normalized.clone()), 0.6, torch.tensor([1.0, 1.0]))
    assert assignment.source_idx.tolist() == [5] and assignment.target_idx.tolist() == [5]
    assert assignment.source_class.tolist() == [1] and assignment.target_class.tolist() == [1]
    assert assignment.domain_label.tolist() == [0, 1]


def test_mask_assign_matches_reference():
    torch.manual_seed(0)
    for trial in range(50):
        c = 1 + trial % 4
        size = 4 + trial % 13
        label = (torch.rand(c) > 0.4).float()
        label[trial % c] = 1.0
        cam = _cam(torch.rand(c, size, size))
        masked = _cam(torch.rand(c, size, size) * 0.9)
        assignment = mask_assign(cam, masked, 0.6, label)
        source = list(zip(assignment.source_idx.tolist(), assignment.source_class.tolist()))
        target = list(zip(assignment.target_idx.tolist(), assignment.target_class.tolist()))
        assert source == _reference_admitted(cam.normalized, 0.6, label)
        assert target == _reference_admitted(masked.normalized, 0.6, label)


def test_mask_assign_tie_goes_to_lowest_class():
    normalized = torch.full((3, 1, 1), 0.8)
    assignment = mask_assign(_cam(normalized), _cam(normalized), 0.6, torch.tensor([0.0, 1.0, 1.0]))
    assert assignment.source_class.tolist() == [1]


def test_mask_assign_shape_mismatch():
    try:
        mask_assign(_cam(torch.rand(2, 4, 4)), _cam(torch.rand(2, 4, 5)), 0.6, torch.ones(2))
    except ShapeError:
        return
    raise AssertionError("shape mismatch accepted")


def test_source_monotone_in_alpha():
    torch.manual_seed(1)
    cam = _cam(torch.rand(3, 8, 8))
    label = torch.tensor([1.0, 1.0, 0.0])
    previous = None
    for k in range(1, 11):
        alpha = 0.05 + 0.09 * k
        current = set(mask_assign(cam, cam, alpha, label).source_idx.tolist())
        if previous is not None:
            assert current <= previous
        previous = current


def test_activation_union():
    normalized = torch.zeros(2, 2, 2)
    normalized[0, 0, 0] = 0.7
    normalized[1, 1, 1] = 0.7
    union = activation_union(normalized, 0.6, torch.tensor([1.0, 0.0]))
    assert union.tolist() == [[True, False], [False, False]]


def test_simple_assign_uniform():
    label = torch.tensor([1.0, 0.0])
    half = simple_assign(_cam(torch.full((2, 4, 4), 0.5)), 0.6, 0.4, label)
    assert half.num_source == 0 and half.target_idx.tolist() == list(range(16))
    high = simple_assign(_cam(torch.full((2, 4, 4), 0.7)), 0.6, 0.4, label)
    assert high.source_idx.tolist() == list(range(16)) and high.num_target == 0


def test_simple_assign_matches_reference():
    torch.manual_seed(2)
    for _ in range(30):
        cam = _cam(torch.rand(3, 8, 8))
        label = torch.tensor([1.0, 0.0, 1.0])
        assignment = simple_assign(cam, 0.6, 0.4, label)
        source, target = [], []
        for y in range(8):
            for x in range(8):
                values = [float(cam.normalized[k, y, x]) for k in (0, 2)]
                peak = max(values)
                cls = (0, 2)[values.index(peak)]
                if peak > 0.6:
                    source.append((y * 8 + x, cls))
                elif peak > 0.4:
                    target.append((y * 8 + x, cls))
        assert list(zip(assignment.source_idx.tolist(), assignment.source_class.tolist())) == source
        assert list(zip(assignment.target_idx.tolist(), assignment.target_class.tolist())) == target
        assert not set(assignment.source_idx.tolist()) & set(assignment.target_idx.tolist())


def test_simple_assign_threshold_order():
    try:
        simple_assign(_cam(torch.rand(1, 2, 2)), 0.4, 0.6, torch.ones(1))
    except ConfigError as e:
        assert e.field == "alpha_lo"
        return
    raise AssertionError("inverted thresholds accepted")


TESTS = [
    test_mask_image_below_alpha_unchanged,
    test_mask_image_all_above,
    test_mask_image_hand_blocks,
    test_mask_image_ignores_absent_classes,
    test_mask_image_batched,
    test_mask_image_errors,
    test_mask_assign_empty_target,
    test_mask_assign_keeps_overlap,
    test_mask_assign_matches_reference,
    test_mask_assign_tie_goes_to_lowest_class,
    test_mask_assign_shape_mismatch,
    test_source_monotone_in_alpha,
    test_activation_union,
    test_simple_assign_uniform,
    test_simple_assign_matches_reference,
    test_simple_assign_threshold_order,
]


def main():
    print("🧪 Assignment Tests")
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
