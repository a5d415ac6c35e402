"""Shared test oracles: central finite differences against autograd, and
the per-loss gradient check suite used by both unit and acceptance tests."""

import torch


def analytic_gradients(loss_fn, params):
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]


def finite_diff_gradients(loss_fn, params, eps=1e-6):
    """Independent oracle: central differences, one parameter at a time."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_fn())
                flat[i] = orig - eps
                lo = float(loss_fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * eps)
            grads.append(g)
    return grads


def relative_grad_error(analytic, numeric):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = max(a.norm().item(), n.norm().item(), 1e-12)
    return float((a - n).norm().item() / denom)


def check_gradients(loss_fn, params, tol=1e-3, eps=1e-6):
    err = relative_grad_error(
        analytic_gradients(loss_fn, params), finite_diff_gradients(loss_fn, params, eps)
    )
    assert err < tol, f"gradient mismatch: relative error {err:.2e} >= {tol}"
    return err


# ---------------------------------------------------------------------------
# the per-loss gradient check suite (tiny double-precision nets, 8x8 inputs)


def _tiny_cfg(seed):
    from myoda.nets import NetConfig

    return NetConfig(base_channels=1, depth=2, patch_disc_layers=2, res_blocks=1, seed=seed)


def _tiny_inputs(seed, n=1):
    torch.manual_seed(seed)
    x_mr = torch.rand(n, 1, 8, 8, dtype=torch.float64) * 2 - 1
    x_ct = torch.rand(n, 1, 8, 8, dtype=torch.float64) * 2 - 1
    y_mr = torch.randint(0, 5, (n, 8, 8))
    return x_mr, x_ct, y_mr


def _check_adversarial_g():
    from myoda.losses import g_adversarial
    from myoda.nets import build_discriminator, build_generator, count_parameters

    gen = build_generator(_tiny_cfg(61)).double()
    disc = build_discriminator(_tiny_cfg(62)).double()
    assert count_parameters(gen) <= 1000 and count_parameters(disc) <= 1000
    x_mr, _, _ = _tiny_inputs(63)
    return check_gradients(lambda: g_adversarial(disc, gen(x_mr)), list(gen.parameters()))


def _check_cycle():
    from myoda.losses import cycle_loss
    from myoda.nets import build_generator

    g_ab = build_generator(_tiny_cfg(64)).double()
    g_ba = build_generator(_tiny_cfg(65)).double()
    _, x_ct, _ = _tiny_inputs(66)
    params = list(g_ab.parameters()) + list(g_ba.parameters())
    return check_gradients(lambda: cycle_loss(g_ab, g_ba, x_ct), params)


def _check_identity():
    from myoda.losses import identity_loss
    from myoda.nets import build_generator

    g1 = build_generator(_tiny_cfg(67)).double()
    g2 = build_generator(_tiny_cfg(68)).double()
    x_mr, x_ct, _ = _tiny_inputs(69)
    params = list(g1.parameters()) + list(g2.parameters())
    return check_gradients(lambda: identity_loss(g1, g2, x_mr, x_ct), params)


def _check_edge():
    from myoda.losses import edge_loss
    from myoda.nets import build_generator

    g1 = build_generator(_tiny_cfg(70)).double()
    g2 = build_generator(_tiny_cfg(71)).double()
    x_mr, x_ct, _ = _tiny_inputs(72)
    params = list(g1.parameters()) + list(g2.parameters())
    return check_gradients(lambda: edge_loss(g1, g2, x_mr, x_ct), params)


def _check_weighted_ce():
    from myoda.losses import weighted_ce
    from myoda.nets import build_segmenter, count_parameters

    seg = build_segmenter(_tiny_cfg(73)).double()
    assert count_parameters(seg) <= 1000
    x_mr, _, y_mr = _tiny_inputs(74)
    weights = (1.0, 10.0, 1.0, 1.0, 10.0)
    return check_gradients(lambda: weighted_ce(seg(x_mr), y_mr, weights), list(seg.parameters()))


def _check_scratch_composite():
    from myoda.losses import (
        LossWeights,
        ScratchLossParts,
        g_adversarial,
        scratch_total_loss,
        sobel_magnitude_t,
        weighted_ce,
    )
    from myoda.nets import build_discriminator, build_generator, build_segmenter

    g1 = build_generator(_tiny_cfg(75)).double()
    g2 = build_generator(_tiny_cfg(76)).double()
    d_ct = build_discriminator(_tiny_cfg(77)).double()
    d_mr = build_discriminator(_tiny_cfg(78)).double()
    seg = build_segmenter(_tiny_cfg(79)).double()
    x_mr, x_ct, y_mr = _tiny_inputs(80)
    w = LossWeights()

    def total():
        fake_ct = g1(x_mr)
        fake_mr = g2(x_ct)
        parts = ScratchLossParts(
            gan_ct=g_adversarial(d_ct, fake_ct),
            gan_mr=g_adversarial(d_mr, fake_mr),
            cyc_ct=(g1(fake_mr) - x_ct).abs().mean(),
            cyc_mr=(g2(fake_ct) - x_mr).abs().mean(),
            identity=(fake_ct - x_mr).abs().mean() + (fake_mr - x_ct).abs().mean(),
            edge=(sobel_magnitude_t(fake_ct) - sobel_magnitude_t(x_mr)).abs().mean()
            + (sobel_magnitude_t(fake_mr) - sobel_magnitude_t(x_ct)).abs().mean(),
            seg=weighted_ce(seg(fake_ct), y_mr, w.ce_class_weights),
        )
        return scratch_total_loss(parts, w)

    params = list(g1.parameters()) + list(g2.parameters()) + list(seg.parameters())
    return check_gradients(total, params)


def _check_finetune_composite():
    from myoda.cohort import self_information_map_t
    from myoda.losses import finetune_total_loss, g_adversarial, weighted_ce
    from myoda.nets import build_discriminator, build_segmenter

    seg = build_segmenter(_tiny_cfg(81)).double()
    disc = build_discriminator(_tiny_cfg(82), in_channels=5).double()
    x_easy, x_hard, y_easy = _tiny_inputs(83)
    weights = (1.0, 10.0, 1.0, 1.0, 10.0)

    def total():
        ce = weighted_ce(seg(x_easy), y_easy, weights)
        si = self_information_map_t(torch.softmax(seg(x_hard), dim=1))
        return finetune_total_loss(ce, g_adversarial(disc, si), 0.001)

    return check_gradients(total, list(seg.parameters()))


GRADIENT_CHECKS = [
    ("adversarial_g_side", _check_adversarial_g),
    ("cycle", _check_cycle),
    ("identity", _check_identity),
    ("edge", _check_edge),
    ("weighted_ce", _check_weighted_ce),
    ("eq7_scratch_composite", _check_scratch_composite),
    ("eq9_finetune_composite", _check_finetune_composite),
]
