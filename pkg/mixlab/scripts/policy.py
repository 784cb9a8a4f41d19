# -*- coding: utf-8 -*-
"""
Token-Factorized Policy Module
Softmax policies over contexts with exact log-probabilities and exact
gradients, parameter arithmetic for the optimizer, and checkpoints.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Hashable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax

from mixlab.scripts.core import ActionSeq, Context

if TYPE_CHECKING:
    from mixlab.scripts.environments import Environment

logger = logging.getLogger(__name__)

POLICY_MODES = ("tabular", "linear")
KEY_MODES = ("summary", "history")
CHECKPOINT_MAGIC = "# mixlab-checkpoint"
CHECKPOINT_VERSION = "v1"
CHECKPOINT_COLUMNS = ["key", "position", "token", "logit"]
DEFAULT_ROW_KEY = "*"


class UnresolvableContextError(KeyError):
    """Tabular key missing and no default row to fall back to."""


class CheckpointError(ValueError):
    """Unreadable, corrupt or version-mismatched checkpoint."""


# ==========================================================
# CONFIGURACIÓN DE MUESTREO
# ==========================================================
@dataclass(frozen=True)
class SamplingConfig:
    """Decoding settings. ``greedy`` overrides temperature and nucleus."""

    temperature: float = 1.0
    top_p: float = 1.0
    greedy: bool = False

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")


GREEDY = SamplingConfig(greedy=True)
EXACT = SamplingConfig()


def select_token(probs: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator) -> int:
    """
    Draw one token id: temperature first, then nucleus truncation.

    Greedy decoding returns the lowest id among the most probable tokens.
    """
    if sampling.greedy:
        return int(np.argmax(probs))
    with np.errstate(divide="ignore"):
        scaled = softmax(np.log(probs) / sampling.temperature)
    if sampling.top_p < 1.0:
        order = np.argsort(-scaled, kind="stable")
        cumulative = np.cumsum(scaled[order])
        n_keep = min(int(np.searchsorted(cumulative, sampling.top_p)) + 1, len(order))
        kept = np.zeros_like(scaled)
        kept[order[:n_keep]] = scaled[order[:n_keep]]
        scaled = kept / kept.sum()
    return int(rng.choice(len(scaled), p=scaled))


# ==========================================================
# POLÍTICA BASE
# ==========================================================
class Policy:
    """
    Anything that assigns a distribution to the next token of an action
    given a context and the tokens already emitted for that action.
    """

    markov: bool = True

    def __init__(self, env: "Environment") -> None:
        self.env = env

    def token_dist(self, context: Context, prefix: Sequence[int] = ()) -> np.ndarray:
        raise NotImplementedError

    def logprob(self, context: Context, action: ActionSeq) -> float:
        """Sum over positions of log p(token | context, prefix); never truncated."""
        total = 0.0
        with np.errstate(divide="ignore"):
            for j, token in enumerate(action.tokens):
                total += float(np.log(self.token_dist(context, action.tokens[:j])[token]))
        return total

    def sample_action(
        self,
        context: Context,
        sampling: SamplingConfig,
        rng: np.random.Generator,
    ) -> ActionSeq:
        """Autoregressive sampling up to M tokens or the end-of-action token."""
        tokens: List[int] = []
        for _ in range(self.env.max_action_len):
            token = select_token(self.token_dist(context, tokens), sampling, rng)
            tokens.append(token)
            if token == self.env.eoa_token:
                break
        return self.env.make_action(tokens)

    def action_distribution(self, context: Context) -> List[Tuple[ActionSeq, float]]:
        """Enumerate every action with positive probability."""
        env = self.env
        outcomes: List[Tuple[ActionSeq, float]] = []

        def expand(prefix: Tuple[int, ...], mass: float) -> None:
            probs = self.token_dist(context, prefix)
            for token in np.flatnonzero(probs > 0):
                tokens = prefix + (int(token),)
                p = mass * float(probs[token])
                if token == env.eoa_token or len(tokens) == env.max_action_len:
                    outcomes.append((env.make_action(tokens), p))
                else:
                    expand(tokens, p)

        expand((), 1.0)
        return outcomes


# ==========================================================
# PARÁMETROS
# ==========================================================
def _decode_key(value: Any) -> Hashable:
    if isinstance(value, list):
        return tuple(_decode_key(v) for v in value)
    return value


def _encode_key(key: Hashable) -> str:
    return json.dumps(key, separators=(",", ":"))


@dataclass
class PolicyParams:
    """
    Logit parameters of a token-factorized softmax policy.

    Tabular mode stores one (M, V) row per context key, created lazily from
    ``default_row``; linear mode stores a (n_features, V) weight matrix
    applied to hashed context features.
    """

    mode: str
    vocab_size: int
    max_action_len: int
    key_mode: str = "summary"
    table: Dict[Hashable, np.ndarray] = field(default_factory=dict)
    default_row: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    n_features: int = 0

    def __post_init__(self) -> None:
        if self.mode not in POLICY_MODES:
            raise ValueError(f"mode must be one of {POLICY_MODES}, got {self.mode!r}")
        if self.key_mode not in KEY_MODES:
            raise ValueError(f"key_mode must be one of {KEY_MODES}, got {self.key_mode!r}")
        if self.mode == "linear":
            if self.n_features < 1:
                raise ValueError("linear mode needs n_features >= 1")
            if self.weights is None:
                self.weights = np.zeros((self.n_features, self.vocab_size))
            if self.weights.shape != (self.n_features, self.vocab_size):
                raise ValueError(f"weights shape {self.weights.shape} != ({self.n_features}, {self.vocab_size})")

    @property
    def row_shape(self) -> Tuple[int, int]:
        return (self.max_action_len, self.vocab_size)

    @classmethod
    def initial(
        cls,
        env: "Environment",
        mode: str = "tabular",
        key_mode: str = "summary",
        n_features: int = 64,
        init_scale: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> "PolicyParams":
        """Starting parameters for a student on ``env``."""
        shape = (env.max_action_len, env.vocab_size)
        if mode == "tabular":
            params = cls(
                mode, env.vocab_size, env.max_action_len, key_mode,
                table={k: np.array(v, dtype=float) for k, v in env.prior_rows().items()},
                default_row=np.zeros(shape),
            )
        else:
            params = cls(mode, env.vocab_size, env.max_action_len, key_mode, n_features=n_features)
        if init_scale > 0:
            rng = rng if rng is not None else np.random.default_rng(0)
            if mode == "linear":
                params.weights += init_scale * rng.standard_normal(params.weights.shape)
            else:
                params.default_row += init_scale * rng.standard_normal(shape)
        return params

    # ----------------------------------------------------------
    # ACCESO
    # ----------------------------------------------------------
    def row(self, key: Hashable) -> np.ndarray:
        found = self.table.get(key)
        if found is not None:
            return found
        if self.default_row is None:
            raise UnresolvableContextError(key)
        return self.default_row

    def feature_indices(self, key: Hashable, position: int, previous: Optional[int]) -> np.ndarray:
        """Hashed indicator features of (summary key, token position, previous token)."""
        parts = key if isinstance(key, tuple) else (key,)
        names = ["bias", f"pos={position}", f"pos={position}|prev={previous}"]
        for i, part in enumerate(parts):
            names.append(f"k{i}={part}")
            names.append(f"pos={position}|k{i}={part}")
        return np.array([zlib.crc32(n.encode("utf-8")) % self.n_features for n in names], dtype=np.int64)

    def coordinates(self) -> Iterator[Tuple[np.ndarray, Tuple[int, ...]]]:
        """Every (array, index) pair holding a parameter; arrays are live."""
        if self.mode == "linear":
            for index in np.ndindex(self.weights.shape):
                yield self.weights, index
            return
        for key in sorted(self.table, key=_encode_key):
            row = self.table[key]
            for index in np.ndindex(row.shape):
                yield row, index

    def flatten(self, keys: Optional[Sequence[Hashable]] = None) -> np.ndarray:
        if self.mode == "linear":
            return self.weights.ravel().copy()
        keys = sorted(self.table, key=_encode_key) if keys is None else keys
        if not keys:
            return np.zeros(0)
        return np.concatenate([
            (self.table[k] if k in self.table else np.zeros(self.row_shape)).ravel() for k in keys
        ])

    # ----------------------------------------------------------
    # ARITMÉTICA
    # ----------------------------------------------------------
    def zeros_like(self) -> "PolicyParams":
        """Empty gradient accumulator with the same layout."""
        if self.mode == "linear":
            return PolicyParams(self.mode, self.vocab_size, self.max_action_len, self.key_mode,
                                weights=np.zeros_like(self.weights), n_features=self.n_features)
        return PolicyParams(self.mode, self.vocab_size, self.max_action_len, self.key_mode)

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.mode, self.vocab_size, self.max_action_len, self.key_mode,
            table={k: v.copy() for k, v in self.table.items()},
            default_row=None if self.default_row is None else self.default_row.copy(),
            weights=None if self.weights is None else self.weights.copy(),
            n_features=self.n_features,
        )

    def accumulate_row(self, key: Hashable, position: int, values: np.ndarray) -> None:
        row = self.table.get(key)
        if row is None:
            row = self.table[key] = np.zeros(self.row_shape)
        row[position] += values

    def axpy(self, alpha: float, other: "PolicyParams") -> "PolicyParams":
        """In place ``self += alpha * other``; rows missing here start from the default row."""
        if self.mode == "linear":
            self.weights += alpha * other.weights
            return self
        for key, values in other.table.items():
            if key not in self.table:
                base = self.default_row if self.default_row is not None else np.zeros(self.row_shape)
                self.table[key] = base.copy()
            self.table[key] += alpha * values
        return self

    def scale(self, alpha: float) -> "PolicyParams":
        if self.mode == "linear":
            self.weights *= alpha
        else:
            for values in self.table.values():
                values *= alpha
        return self

    def max_abs(self) -> float:
        if self.mode == "linear":
            return float(np.abs(self.weights).max(initial=0.0))
        return max((float(np.abs(v).max()) for v in self.table.values()), default=0.0)

    def is_finite(self) -> bool:
        arrays = [self.weights] if self.mode == "linear" else list(self.table.values())
        if self.default_row is not None:
            arrays.append(self.default_row)
        return all(np.isfinite(a).all() for a in arrays)


@dataclass(frozen=True)
class PolicyConfig:
    mode: str = "tabular"
    key_mode: str = "summary"
    n_features: int = 64
    init_scale: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in POLICY_MODES:
            raise ValueError(f"mode must be one of {POLICY_MODES}, got {self.mode!r}")
        if self.key_mode not in KEY_MODES:
            raise ValueError(f"key_mode must be one of {KEY_MODES}, got {self.key_mode!r}")
        if self.init_scale < 0:
            raise ValueError(f"init_scale must be >= 0, got {self.init_scale}")

    def initial_params(self, env: "Environment", rng: Optional[np.random.Generator] = None) -> PolicyParams:
        return PolicyParams.initial(env, self.mode, self.key_mode, self.n_features, self.init_scale, rng)


# ==========================================================
# POLÍTICA SOFTMAX
# ==========================================================
class SoftmaxPolicy(Policy):
    """Student policy: softmax of tabular or linear logits at every token position."""

    def __init__(self, params: PolicyParams, env: "Environment") -> None:
        super().__init__(env)
        if (params.vocab_size, params.max_action_len) != (env.vocab_size, env.max_action_len):
            raise ValueError(
                f"params layout (V={params.vocab_size}, M={params.max_action_len}) does not match "
                f"environment (V={env.vocab_size}, M={env.max_action_len})"
            )
        self.params = params

    @property
    def markov(self) -> bool:
        return self.params.key_mode == "summary"

    def context_key(self, context: Context) -> Hashable:
        if self.params.key_mode == "summary":
            return self.env.summary_key(context)
        return ("hist", context.instance.seed_prompt,
                tuple((a.tokens, o.payload) for a, o in context.history))

    def _features(self, context: Context, prefix: Sequence[int]) -> np.ndarray:
        previous = prefix[-1] if prefix else None
        return self.params.feature_indices(self.context_key(context), len(prefix), previous)

    def logits(self, context: Context, prefix: Sequence[int] = ()) -> np.ndarray:
        position = len(prefix)
        if position >= self.params.max_action_len:
            raise ValueError(f"prefix length {position} must be < M={self.params.max_action_len}")
        if self.params.mode == "tabular":
            return self.params.row(self.context_key(context))[position]
        return self.params.weights[self._features(context, prefix)].sum(axis=0)

    def token_dist(self, context: Context, prefix: Sequence[int] = ()) -> np.ndarray:
        return softmax(self.logits(context, prefix))

    def logprob(self, context: Context, action: ActionSeq) -> float:
        return float(sum(
            log_softmax(self.logits(context, action.tokens[:j]))[token]
            for j, token in enumerate(action.tokens)
        ))

    def add_logit_grad(
        self,
        grad: PolicyParams,
        context: Context,
        prefix: Sequence[int],
        dlogits: np.ndarray,
    ) -> None:
        """Backpropagate a gradient on the logits of one position into ``grad``."""
        if self.params.mode == "tabular":
            grad.accumulate_row(self.context_key(context), len(prefix), dlogits)
        else:
            np.add.at(grad.weights, self._features(context, prefix), dlogits)

    def grad_logprob(
        self,
        context: Context,
        action: ActionSeq,
        scale: float = 1.0,
        out: Optional[PolicyParams] = None,
    ) -> PolicyParams:
        """
        Exact gradient of ``logprob`` (one-hot minus probabilities per position).

        Args:
            context: Conditioning context.
            action: Action whose log-probability is differentiated.
            scale: Multiplier applied before accumulation.
            out: Accumulator to add into; a fresh one is created when omitted.

        Returns:
            The accumulator holding ``scale * grad logprob``.
        """
        grad = out if out is not None else self.params.zeros_like()
        for j, token in enumerate(action.tokens):
            prefix = action.tokens[:j]
            dlogits = -self.token_dist(context, prefix)
            dlogits[token] += 1.0
            self.add_logit_grad(grad, context, prefix, scale * dlogits)
        return grad


# ==========================================================
# CHECKPOINTS
# ==========================================================
def _checkpoint_frame(params: PolicyParams) -> pd.DataFrame:
    rows = []
    if params.mode == "linear":
        for (f, v), logit in np.ndenumerate(params.weights):
            rows.append((str(f), 0, v, logit))
        return pd.DataFrame(rows, columns=CHECKPOINT_COLUMNS)
    entries = [(_encode_key(k), v) for k, v in params.table.items()]
    if params.default_row is not None:
        entries.append((DEFAULT_ROW_KEY, params.default_row))
    for key, values in sorted(entries, key=lambda e: e[0]):
        for (j, v), logit in np.ndenumerate(values):
            rows.append((key, j, v, logit))
    return pd.DataFrame(rows, columns=CHECKPOINT_COLUMNS)


def save_checkpoint(params: PolicyParams, path: Path, header_lines: Sequence[str] = ()) -> Path:
    """
    Write parameters as a sorted (key, position, token, logit) CSV table.

    Args:
        params: Parameters to persist.
        path: Destination file.
        header_lines: Provenance lines written first (each starting with '#').

    Returns:
        The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = (
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} mode={params.mode} key_mode={params.key_mode} "
        f"V={params.vocab_size} M={params.max_action_len} n_features={params.n_features}"
    )
    with open(path, "w", encoding="utf-8", newline="") as handle:
        for line in header_lines:
            handle.write(line.rstrip("\n") + "\n")
        handle.write(meta + "\n")
        _checkpoint_frame(params).to_csv(handle, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Checkpoint saved: {path}")
    return path


def load_checkpoint(path: Path) -> PolicyParams:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: If the file is missing, corrupt or of another version.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    n_header = 0
    meta: Optional[Dict[str, str]] = None
    while n_header < len(lines) and lines[n_header].startswith("#"):
        line = lines[n_header]
        if line.startswith(CHECKPOINT_MAGIC):
            parts = line[len(CHECKPOINT_MAGIC):].split()
            if not parts or parts[0] != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: checkpoint version {parts[0] if parts else '?'} != {CHECKPOINT_VERSION}"
                )
            meta = dict(p.split("=", 1) for p in parts[1:] if "=" in p)
        n_header += 1
    if meta is None:
        raise CheckpointError(f"{path}: missing '{CHECKPOINT_MAGIC}' header")

    try:
        mode, key_mode = meta["mode"], meta["key_mode"]
        V, M, n_features = int(meta["V"]), int(meta["M"]), int(meta["n_features"])
        frame = pd.read_csv(path, skiprows=n_header, dtype={"key": str}, float_precision="round_trip")
        if list(frame.columns) != CHECKPOINT_COLUMNS:
            raise CheckpointError(f"{path}: unexpected columns {list(frame.columns)}")
        if not np.isfinite(frame["logit"].to_numpy(dtype=float)).all():
            raise CheckpointError(f"{path}: non-finite logits")
        if not frame["position"].between(0, M - 1).all() or not frame["token"].between(0, V - 1).all():
            raise CheckpointError(f"{path}: position or token out of range")

        if mode == "linear":
            weights = np.full((n_features, V), np.nan)
            weights[frame["key"].astype(int).to_numpy(), frame["token"].to_numpy()] = frame["logit"].to_numpy()
            if np.isnan(weights).any():
                raise CheckpointError(f"{path}: incomplete weight matrix")
            return PolicyParams(mode, V, M, key_mode, weights=weights, n_features=n_features)

        params = PolicyParams(mode, V, M, key_mode)
        for key, group in frame.groupby("key", sort=False):
            values = np.full((M, V), np.nan)
            values[group["position"].to_numpy(), group["token"].to_numpy()] = group["logit"].to_numpy()
            if np.isnan(values).any():
                raise CheckpointError(f"{path}: incomplete row for key {key}")
            if key == DEFAULT_ROW_KEY:
                params.default_row = values
            else:
                params.table[_decode_key(json.loads(key))] = values
        return params
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
