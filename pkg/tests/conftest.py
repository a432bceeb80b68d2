"""Shared tiny trained stack, reused across test modules (session scope)."""

import pytest

from speechmask.mam import MamTrainConfig, train_mam
from speechmask.masked_transformer import (
    GenerationStack,
    MaskedTrainConfig,
    StudentConfig,
    train_masked,
)
from speechmask.numerics import RngState
from speechmask.rvq import RvqTrainConfig, train_rvq
from speechmask.sqa import MaskSchedule
from speechmask.synth import CorpusSpec, generate

TOY_SPEC = CorpusSpec(num_sequences=48)
TOY_STUDENT = StudentConfig(width=32, blocks=2, heads=4, score_dim=8)
TOY_SCHEDULE = MaskSchedule(0.5, 0.3, 0.0, 0.0, 0.3, 10)


@pytest.fixture(scope="session")
def toy_corpus():
    return generate(TOY_SPEC, RngState(77))


@pytest.fixture(scope="session")
def toy_split(toy_corpus):
    return toy_corpus[:40], toy_corpus[40:]


@pytest.fixture(scope="session")
def toy_rvq(toy_split):
    train, _ = toy_split
    cfg = RvqTrainConfig(dim=16, hidden=24, entries=32, layers=6, epochs=10, batch_size=8)
    model, curve = train_rvq([s.motion for s in train], cfg, RngState(1))
    model.loss_curve = curve
    return model


@pytest.fixture(scope="session")
def toy_mam(toy_split, toy_rvq):
    train, _ = toy_split
    cfg = MamTrainConfig(d_q=16, heads=2, shared_blocks=1, epochs=30, batch_size=8,
                         lr=1e-3)
    model, curve = train_mam(train, toy_rvq, cfg, RngState(2))
    model.loss_curve = curve
    return model


@pytest.fixture(scope="session")
def toy_masked(toy_split, toy_rvq, toy_mam):
    train, _ = toy_split
    cfg = MaskedTrainConfig(student=TOY_STUDENT, epochs=TOY_SCHEDULE.total_epochs,
                            batch_size=8)
    student, teacher, curve = train_masked(train, toy_rvq, toy_mam, TOY_SCHEDULE,
                                           cfg, RngState(3))
    return student, teacher, curve


@pytest.fixture(scope="session")
def toy_stack(toy_rvq, toy_mam, toy_masked):
    student, _, _ = toy_masked
    return GenerationStack(toy_rvq, toy_mam, student, TOY_STUDENT)
