import numpy as np
import pytest

from freeecho.data import ToyDatasetConfig, generate_toy_dataset
from freeecho.denoiser import GaussianOracle, gaussian_oracle_denoiser
from freeecho.pipeline import ClassifierFreeGenerator, FreeEchoGenerator, SDEditGenerator, UnconditionalGenerator
from freeecho.pseudo import dataset_intensity_histogram, palette_of
from freeecho.schedule import NoiseSchedule

ORACLE = gaussian_oracle_denoiser(GaussianOracle(0.0, 0.25))
SCHED = NoiseSchedule(num_steps=16)


def conditional(x, sigma, condition=None):
    out = ORACLE(x, sigma)
    return out if condition is None else out + 0.05 * np.asarray(condition)[0]


@pytest.fixture(scope="module")
def toy():
    return generate_toy_dataset(ToyDatasetConfig(num_videos=6, frames=4, height=16, width=16))


@pytest.fixture(scope="module")
def hist(toy):
    return dataset_intensity_histogram(toy)


def test_zero_steps_returns_pseudo_video(toy, hist):
    gen = FreeEchoGenerator(ORACLE, hist, 4, SCHED, t_i=0)
    seg = toy[0][1]
    assert np.array_equal(gen(seg, 3), gen.pseudo_video(seg).frames)


def test_batch_matches_single_and_is_deterministic(toy, hist):
    gen = FreeEchoGenerator(ORACLE, hist, 4, SCHED, t_i=6)
    seg = toy[1][1]
    batch = gen.batch(seg, [1, 2, 3])
    assert np.array_equal(batch[1], gen(seg, 2))
    assert np.array_equal(batch, gen.batch(seg, [1, 2, 3]))
    assert not np.array_equal(batch[0], batch[1])
    assert batch.min() >= -1 and batch.max() <= 1


def test_pseudo_video_cached(toy, hist):
    gen = FreeEchoGenerator(ORACLE, hist, 4, SCHED, t_i=4)
    assert gen.pseudo_video(toy[2][1]) is gen.pseudo_video(toy[2][1])


def test_sdedit_with_remapped_palette_matches_free_echo(toy, hist):
    seg = toy[3][1]
    fe = FreeEchoGenerator(ORACLE, hist, 4, SCHED, t_i=5)
    sd = SDEditGenerator(ORACLE, 4, SCHED, t_i=5, palette=palette_of(seg, fe.pseudo_video(seg).intensity_image))
    assert np.array_equal(fe(seg, 8), sd(seg, 8))


def test_sdedit_default_palette_differs(toy, hist):
    seg = toy[3][1]
    fe = FreeEchoGenerator(ORACLE, hist, 4, SCHED, t_i=5)
    sd = SDEditGenerator(ORACLE, 4, SCHED, t_i=5)
    assert not np.array_equal(fe.pseudo_video(seg).frames, sd.pseudo_video(seg).frames)


def test_classifier_free_zero_guidance_is_unconditional(toy):
    seg = toy[0][1]
    cf = ClassifierFreeGenerator(conditional, 4, (16, 16), SCHED, guidance_scale=0.0)
    un = UnconditionalGenerator(conditional, 4, (16, 16), SCHED)
    np.testing.assert_array_equal(cf.batch(seg, [4, 5]), un.batch(seg, [4, 5]))
    guided = ClassifierFreeGenerator(conditional, 4, (16, 16), SCHED, guidance_scale=7.0)(seg, 4)
    assert not np.array_equal(guided, cf(seg, 4))
    assert cf.t_i == 16


def test_classifier_free_checks(toy):
    with pytest.raises(ValueError):
        ClassifierFreeGenerator(conditional, 4, (16, 16), SCHED, guidance_scale=-1)
    with pytest.raises(ValueError):
        ClassifierFreeGenerator(conditional, 4, (8, 8), SCHED)(toy[0][1], 0)


def test_unconditional_ignores_segmentation(toy):
    un = UnconditionalGenerator(ORACLE, 4, (16, 16), SCHED)
    assert np.array_equal(un(toy[0][1], 1), un(None, 1))
