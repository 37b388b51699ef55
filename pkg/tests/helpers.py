import torch

from stgrid_recon.grid import CALENDAR_DIM
from stgrid_recon.nets import AttentionConfig, Condition, NetConfig


def tiny_net_config(stage, rows=8, cols=8, d_model=8, heads=2, base=4, history=4, top_k=2, magnification=2):
    return NetConfig(
        stage=stage,
        rows=rows,
        cols=cols,
        magnification=magnification,
        history=history,
        feature_dim=CALENDAR_DIM,
        base_channels=base,
        attention=AttentionConfig(d_model, heads, 1, 2 * d_model),
        times_layers=1,
        top_k=top_k,
        tau_dim=8,
    )


def tiny_condition(cfg, b, seed=0):
    g = torch.Generator().manual_seed(seed)
    h, w = cfg.out_shape
    hist = torch.randn(b, cfg.history, cfg.rows, cfg.cols, generator=g)
    feats = torch.rand(b, cfg.history, cfg.feature_dim, generator=g)
    if cfg.stage == "C":
        masks = (torch.rand(b, cfg.history, cfg.rows, cfg.cols, generator=g) > 0.4).float()
        hist = hist * masks
        return Condition(hist[:, -1:], hist, feats, masks[:, -1:], masks)
    up = hist[:, -1:].repeat_interleave(cfg.magnification, -2).repeat_interleave(cfg.magnification, -1)
    return Condition(up, hist, feats)


def fd_check(loss_fn, module, per_tensor=3, h=1e-6, rtol=1e-4, floor=1e-5):
    """Compare autograd with central differences on a few entries of every parameter.

    Relative error is measured against max(|numeric|, floor); the floor sits
    well above the ~1e-10 round-off of a float64 central difference, so
    gradients that are zero by construction (e.g. a conv bias feeding a
    GroupNorm) do not fail on noise.
    """
    module.zero_grad()
    loss_fn().backward()
    g = torch.Generator().manual_seed(0)
    checked = 0
    for name, p in module.named_parameters():
        flat = p.data.view(-1)
        picks = torch.randperm(flat.numel(), generator=g)[:per_tensor]
        for i in picks.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = p.grad.view(-1)[i].item()
            err = abs(numeric - analytic) / max(abs(numeric), floor)
            assert err <= rtol, f"{name}[{i}]: autograd {analytic:.3e} vs fd {numeric:.3e}"
            checked += 1
    assert checked > 0
    return checked
