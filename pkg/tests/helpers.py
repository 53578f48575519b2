import numpy as np
import torch
import torch.nn as nn

from freeecho.training import denoising_loss


class TinyNet(nn.Module):
    """A few hundred float64 parameters: one hidden space-only conv layer
    modulated by the noise code."""

    def __init__(self, hidden=6, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv3d(1, hidden, (1, 3, 3), padding=(0, 1, 1)).double()
        self.film = nn.Linear(1, hidden).double()
        self.conv2 = nn.Conv3d(hidden, 1, (1, 3, 3), padding=(0, 1, 1)).double()
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(0.3 * torch.randn(p.shape, generator=g, dtype=torch.float64))

    def forward(self, x, c_noise, condition=None):
        h = self.conv1(x) * (1 + self.film(c_noise.reshape(-1, 1)))[:, :, None, None, None]
        return self.conv2(torch.tanh(h))


def gradient_check(denoiser, x, sigma, noise, schedule, h=1e-4):
    """Autograd vs central differences of the denoising loss; returns the
    worst elementwise relative error and the number of parameters."""
    params = [p for p in denoiser.parameters() if p.requires_grad]
    loss = denoising_loss(denoiser, x, schedule, sigma=sigma, noise=noise)
    analytic = torch.autograd.grad(loss, params)
    worst = 0.0
    n = 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + h
                up = denoising_loss(denoiser, x, schedule, sigma=sigma, noise=noise).item()
                flat[i] = keep - h
                down = denoising_loss(denoiser, x, schedule, sigma=sigma, noise=noise).item()
                flat[i] = keep
                fd = (up - down) / (2 * h)
                a = g.view(-1)[i].item()
                scale = max(abs(a), abs(fd), 1e-6)
                worst = max(worst, abs(a - fd) / scale)
                n += 1
    return worst, n


def gradient_check_case(seed=0):
    from freeecho.denoiser import wrap_preconditioned
    from freeecho.schedule import NoiseSchedule

    sched = NoiseSchedule()
    rng = np.random.default_rng(seed)
    den = wrap_preconditioned(TinyNet(seed=seed), sched)
    x = torch.as_tensor(0.5 * rng.standard_normal((2, 1, 2, 6, 6)))
    sigma = np.array([0.3, 2.0])
    noise = rng.standard_normal((2, 1, 2, 6, 6))
    return gradient_check(den, x, sigma, noise, sched)
