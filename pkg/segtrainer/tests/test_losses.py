import pytest
import torch

from segtrainer.losses import combined_loss, dice_loss, focal_loss


def random_pair(seed=0, shape=(2, 3, 8, 10)):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(shape, generator=g)
    targets = (torch.rand(shape, generator=g) > 0.8).float()
    return logits, targets


def test_perfect_prediction_near_zero():
    targets = (torch.rand(1, 3, 16, 16) > 0.7).float()
    logits = (targets * 2 - 1) * 20.0  # saturated correct logits
    assert focal_loss(logits, targets) < 1e-6
    assert dice_loss(logits, targets) < 1e-2


def test_focal_downweights_easy_examples():
    targets = torch.ones(1, 1, 4, 4)
    confident = torch.full((1, 1, 4, 4), 3.0)
    hesitant = torch.full((1, 1, 4, 4), 0.5)
    assert focal_loss(confident, targets) < focal_loss(hesitant, targets)


@pytest.mark.parametrize("seed", range(5))
def test_losses_permutation_invariant(seed):
    logits, targets = random_pair(seed)
    flat_l = logits.reshape(2, 3, -1)
    flat_t = targets.reshape(2, 3, -1)
    perm = torch.randperm(flat_l.shape[-1],
                          generator=torch.Generator().manual_seed(seed + 99))
    shuffled_l = flat_l[..., perm].reshape(logits.shape)
    shuffled_t = flat_t[..., perm].reshape(targets.shape)
    assert torch.allclose(focal_loss(logits, targets),
                          focal_loss(shuffled_l, shuffled_t), atol=1e-6)
    assert torch.allclose(dice_loss(logits, targets),
                          dice_loss(shuffled_l, shuffled_t), atol=1e-6)


def test_combined_parts_and_weights():
    logits, targets = random_pair(3)
    total, f, d = combined_loss(logits, targets, 1.0, 1.0)
    assert torch.isfinite(total)
    assert torch.allclose(total, f + d)
    doubled, _, _ = combined_loss(logits, targets, 2.0, 1.0)
    assert torch.allclose(doubled, 2 * f + d)


def test_degenerate_weights_rejected():
    logits, targets = random_pair(4)
    with pytest.raises(ValueError, match="degenerate"):
        combined_loss(logits, targets, 0.0, 0.0)
