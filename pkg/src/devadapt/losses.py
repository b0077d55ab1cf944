"""Loss terms for the generator, least-squares GAN and CycleGAN adapters.

All expectations are batch means. Scores are discriminator outputs in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class LossWeights:
    lambda_id: float = 0.0
    lambda_tr: float = 0.0
    lambda_cyc: float = 0.0

    def __post_init__(self):
        for name in ("lambda_id", "lambda_tr", "lambda_cyc"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def l1(a, b) -> torch.Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def transfer_loss(generated, paired_source) -> torch.Tensor:
    """Mean absolute error between adapted target patches and their paired source patches."""
    return l1(generated, paired_source)


def identity_loss(g, batch) -> torch.Tensor:
    """How much ``g`` moves inputs that already belong to its output domain."""
    batch = _tensor(batch)
    return l1(g(batch), batch)


def generator_total_loss(g, target_batch, paired_source_batch, source_batch, w: LossWeights) -> torch.Tensor:
    loss = transfer_loss(g(_tensor(target_batch)), paired_source_batch)
    if w.lambda_id:
        loss = loss + w.lambda_id * identity_loss(g, source_batch)
    return loss


def adversarial_loss_d(fake_scores, real_scores) -> torch.Tensor:
    """Least-squares discriminator target: fakes toward 0, reals toward 1."""
    fake_scores, real_scores = _tensor(fake_scores), _tensor(real_scores)
    return (fake_scores ** 2).mean() + ((real_scores - 1) ** 2).mean()


def adversarial_loss_g(fake_scores) -> torch.Tensor:
    """Least-squares generator target: push fakes toward the real label."""
    return ((_tensor(fake_scores) - 1) ** 2).mean()


def gan_total_loss(adversarial, transfer, identity, w: LossWeights):
    return adversarial + w.lambda_tr * transfer + w.lambda_id * identity


def cycle_consistency_loss(g_ts, g_st, source_batch, target_batch) -> torch.Tensor:
    source_batch, target_batch = _tensor(source_batch), _tensor(target_batch)
    return l1(g_ts(g_st(source_batch)), source_batch) + l1(g_st(g_ts(target_batch)), target_batch)


def cyclegan_total_loss(adv_st, adv_ts, cycle, id_st, id_ts, w: LossWeights):
    """Both directions' terms summed, then halved (mean over the two GANs)."""
    return (adv_st + adv_ts + w.lambda_cyc * cycle + w.lambda_id * (id_st + id_ts)) / 2


# -- objectives evaluated from networks -------------------------------------


def gan_generator_objective(g, d, target_batch, paired_source_batch, source_batch, w: LossWeights) -> torch.Tensor:
    fake = g(target_batch)
    adv = adversarial_loss_g(d(fake))
    tr = transfer_loss(fake, paired_source_batch) if w.lambda_tr else fake.new_zeros(())
    idt = identity_loss(g, source_batch) if w.lambda_id else fake.new_zeros(())
    return gan_total_loss(adv, tr, idt, w)


def gan_discriminator_objective(d, g, target_batch, source_batch) -> torch.Tensor:
    with torch.no_grad():
        fake = g(target_batch)
    return adversarial_loss_d(d(fake), d(source_batch))


def cyclegan_generator_objective(g_ts, g_st, d_s, d_t, source_batch, target_batch, w: LossWeights) -> torch.Tensor:
    fake_s = g_ts(target_batch)
    fake_t = g_st(source_batch)
    adv_ts = adversarial_loss_g(d_s(fake_s))
    adv_st = adversarial_loss_g(d_t(fake_t))
    cyc = l1(g_st(fake_s), target_batch) + l1(g_ts(fake_t), source_batch)
    id_ts = identity_loss(g_ts, source_batch)
    id_st = identity_loss(g_st, target_batch)
    return cyclegan_total_loss(adv_st, adv_ts, cyc, id_st, id_ts, w)
