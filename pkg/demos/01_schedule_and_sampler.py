"""
Noise levels, preconditioning and the ODE sampler
=================================================

Everything here runs on a closed-form Gaussian denoiser, so the sampler can
be checked against exact answers without training anything.
"""

import numpy as np

from freeecho import GaussianOracle, NoiseSchedule, SamplerConfig, gaussian_oracle_denoiser, sample_full
from freeecho.sampler import integrate, sample_truncated, sigma_at_step
from freeecho.schedule import loss_weight, precondition_coeffs, sample_training_sigma, step_sigmas

sched = NoiseSchedule()

# the sampling ladder: 64 rungs from sigma_max down to sigma_min, then 0
ladder = step_sigmas(sched)
print("first rungs:", np.round(ladder[:4], 2), " last rungs:", np.round(ladder[-4:], 4))

# t_i counts rungs from the clean end, so a larger t_i starts noisier
for t in (15, 35, 55):
    print(f"t_i={t:2d} starts at sigma={sigma_at_step(sched, t):.3f}")

# preconditioning: the loss weight undoes c_out^2 at every noise level
for s in (0.002, 0.5, 80.0):
    c = precondition_coeffs(s)
    print(f"sigma={s:<6} c_skip={c.c_skip:.4f} c_out={c.c_out:.4f} c_in={c.c_in:.4f} "
          f"w*c_out^2={loss_weight(s) * c.c_out ** 2:.15f}")

# training noise levels are log-normal
ln = np.log(sample_training_sigma(np.random.default_rng(0), 100_000))
print(f"ln sigma: mean {ln.mean():.3f}, std {ln.std():.3f}")

# %%
# With data ~ N(0, 0.25 I) the ideal denoiser is linear in x, and sampling
# from pure noise should give back that Gaussian.
oracle = gaussian_oracle_denoiser(GaussianOracle(0.0, 0.25))
x = sample_full(oracle, (10_000, 8), SamplerConfig(solver="heun", t_i=64, seed=0))
print("sampled variance per coordinate:", np.round(x.var(axis=0), 3))

# %%
# Error against the exact ODE endpoint shrinks like 1/N for Euler, 1/N^2 for Heun.
x0 = 80.0 * np.random.default_rng(1).standard_normal(64)
exact = x0 * 0.5 / np.sqrt(0.25 + 80.0 ** 2)
for n in (8, 16, 32, 64, 128):
    sig = step_sigmas(NoiseSchedule(num_steps=n))
    errs = [np.abs(integrate(oracle, x0, sig, s) - exact).max() for s in ("euler", "heun")]
    print(f"N={n:3d}  euler {errs[0]:.2e}  heun {errs[1]:.2e}")

# %%
# A truncated run starts from a noised reference and only walks the last t_i rungs.
ref = np.full((2, 8), 0.3)
noisy = ref + sigma_at_step(sched, 10) * np.random.default_rng(2).standard_normal(ref.shape)
out = sample_truncated(oracle, noisy, SamplerConfig(t_i=10))
print("truncated run, mean before/after:", noisy.mean().round(3), out.mean().round(3))
