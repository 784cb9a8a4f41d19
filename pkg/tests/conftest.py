# -*- coding: utf-8 -*-
"""Shared fixtures: small environments, seeded generators and random policies."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Hashable, Optional, Sequence

import numpy as np
import pytest

from mixlab.scripts.core import ActionSeq, Context, TaskInstance
from mixlab.scripts.environments import (
    ChainRepairEnv,
    ChainRepairSpec,
    TaskSampler,
    TokenEditEnv,
    TokenEditSpec,
)
from mixlab.scripts.policy import Policy, PolicyParams


class StubEnv:
    """Single-state environment with V tokens and actions of up to M tokens."""

    def __init__(self, V: int = 4, M: int = 1, eoa_token: Optional[int] = None, finish_token: int = -1) -> None:
        self.vocab_size = V
        self.max_action_len = M
        self.eoa_token = eoa_token
        self.finish_token = finish_token
        self.T_max = 1

    def summary_key(self, context: Context) -> Hashable:
        return ("s",)

    def prior_rows(self) -> Dict[Hashable, np.ndarray]:
        return {}

    def make_action(self, tokens: Sequence[int]) -> ActionSeq:
        tokens = tuple(int(t) for t in tokens)
        return ActionSeq(tokens, is_finish=bool(tokens) and tokens[0] == self.finish_token)


class FixedPolicy(Policy):
    """Same next-token distribution at every context and position."""

    def __init__(self, env, probs: Sequence[float]) -> None:
        super().__init__(env)
        self.probs = np.asarray(probs, dtype=float)

    def token_dist(self, context, prefix=()):
        return self.probs.copy()


def random_tabular(env, rng: np.random.Generator, scale: float = 1.0, key_mode: str = "summary") -> PolicyParams:
    params = PolicyParams.initial(env, "tabular", key_mode)
    params.default_row = scale * rng.standard_normal(params.row_shape)
    return params


def stub_context(T_max: int = 1) -> Context:
    return Context(TaskInstance(id=0, seed_prompt=0, horizon_cap=T_max))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def chain_env() -> ChainRepairEnv:
    return ChainRepairEnv(ChainRepairSpec(T_max=10, K=4, D=2))


@pytest.fixture
def tiny_chain_env() -> ChainRepairEnv:
    return ChainRepairEnv(ChainRepairSpec(T_max=3, K=2, D=1))


@pytest.fixture
def edit_env() -> TokenEditEnv:
    return TokenEditEnv(TokenEditSpec(T_max=8, V=9, M=3))


@pytest.fixture
def chain_instance(chain_env) -> TaskInstance:
    return TaskSampler(chain_env, seed=0).instance(0)


@pytest.fixture
def edit_instance(edit_env) -> TaskInstance:
    return TaskSampler(edit_env, seed=0).instance(0)


MINIMAL_CONFIG = """
[experiment]
id = tiny
seed = 3
output_dir = {out}

[env]
kind = chain_repair
T_max = 6
K = 2
D = 1

[method]
kind = {method}

[schedule]
iterations = 2
epochs_per_batch = 1
batch_instances = 4
group_size = 2

[optimizer]
step_size = 2.0
minibatch_size = 8

[eval]
heldout_instances = 5
kl_rollouts = 5

[study]
methods = sft
horizons = 6
budgets = 0, 20
seeds = 0
budget = 40

[logging]
level = WARNING
"""


@pytest.fixture
def write_config(tmp_path: Path):
    def write(method: str = "dagger_turn", out: Optional[Path] = None, extra: str = "") -> Path:
        path = tmp_path / f"config_{method}.ini"
        path.write_text(MINIMAL_CONFIG.format(out=out or tmp_path / "out", method=method) + extra,
                        encoding="utf-8")
        return path

    return write
