"""Probability tables, the triple score, its gradient and semantic codes.

Every categorical distribution is stored as unconstrained logits and read
through a softmax. Per feature ``k`` of a triple ``(h, r, t)``::

    a = P(z_k | h)   b = P(z_k | r)   u = P(y_k | t)   v = P(y_k | r)
    p = normalize(a * b)               q = normalize(u * v)
    w_c = exp(-|p_c - q_c| / sigma)
    score = sum_k P(f = k | r) * ln sum_c w_c a_c b_c u_c v_c

Head and tail categories are forced equal, so only the diagonal ``z = y = c``
of the category double sum survives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from ksr.data import Triple

MAGIC = b"KSR1"
FORMAT_VERSION = 1
TABLE_NAMES = ("entity_logits", "rel_subj_logits", "rel_obj_logits", "rel_feat_logits")
_HEADER = struct.Struct("<4sIIIIIdq")


class ConfigError(ValueError):
    pass


class NumericalInstabilityError(ArithmeticError):
    def __init__(self, message, triple=None, feature=None):
        super().__init__(message)
        self.triple = triple
        self.feature = feature


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n: int = 10
    d: int = 10
    sigma: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")


@dataclass
class KsrModel:
    entity_logits: np.ndarray  # (E, n, d)
    rel_subj_logits: np.ndarray  # (R, n, d)
    rel_obj_logits: np.ndarray  # (R, n, d)
    rel_feat_logits: np.ndarray  # (R, n)
    config: ModelConfig
    meta: dict = field(default_factory=dict)

    @property
    def num_entities(self) -> int:
        return self.entity_logits.shape[0]

    @property
    def num_relations(self) -> int:
        return self.rel_subj_logits.shape[0]

    @property
    def num_parameters(self) -> int:
        return sum(getattr(self, name).size for name in TABLE_NAMES)

    def tables(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TABLE_NAMES}

    def copy(self) -> "KsrModel":
        return KsrModel(*(getattr(self, name).copy() for name in TABLE_NAMES), self.config, dict(self.meta))

    def entity_probs(self) -> np.ndarray:
        """P(z_i = c | e) for every entity, shape (E, n, d)."""
        return softmax(self.entity_logits, axis=-1)

    def rel_subj_probs(self) -> np.ndarray:
        return softmax(self.rel_subj_logits, axis=-1)

    def rel_obj_probs(self) -> np.ndarray:
        return softmax(self.rel_obj_logits, axis=-1)

    def rel_feat_probs(self) -> np.ndarray:
        return softmax(self.rel_feat_logits, axis=-1)


def init_model(config: ModelConfig, num_entities: int, num_relations: int,
               rng: np.random.Generator | None = None, zero: bool = False) -> KsrModel:
    """Logits i.i.d. uniform in [-0.1, 0.1]; ``zero=True`` gives the all-uniform debug model."""
    if num_entities < 1 or num_relations < 1:
        raise ConfigError(f"need at least one entity and relation, got E={num_entities}, R={num_relations}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n, d = config.n, config.d
    shapes = [(num_entities, n, d), (num_relations, n, d), (num_relations, n, d), (num_relations, n)]
    if zero:
        tables = [np.zeros(s) for s in shapes]
    else:
        tables = [rng.uniform(-0.1, 0.1, size=s) for s in shapes]
    return KsrModel(*tables, config=config)


def subject_message(m: KsrModel, h: int, r: int, k: int) -> np.ndarray:
    return softmax(m.entity_logits[h, k] + m.rel_subj_logits[r, k])


def object_message(m: KsrModel, t: int, r: int, k: int) -> np.ndarray:
    return softmax(m.entity_logits[t, k] + m.rel_obj_logits[r, k])


def coupling_weights(p: np.ndarray, q: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-np.abs(np.asarray(p) - np.asarray(q)) / sigma)


def _forward(m: KsrModel, triple) -> dict:
    h, r, t = (int(x) for x in triple)
    la = log_softmax(m.entity_logits[h], axis=-1)
    lb = log_softmax(m.rel_subj_logits[r], axis=-1)
    lu = log_softmax(m.entity_logits[t], axis=-1)
    lv = log_softmax(m.rel_obj_logits[r], axis=-1)
    p = softmax(m.entity_logits[h] + m.rel_subj_logits[r], axis=-1)
    q = softmax(m.entity_logits[t] + m.rel_obj_logits[r], axis=-1)
    g = -np.abs(p - q) / m.config.sigma + la + lb + lu + lv
    per_feature = logsumexp(g, axis=-1)
    pi = softmax(m.rel_feat_logits[r])
    bad = ~np.isfinite(per_feature)
    if bad.any():
        k = int(np.argmax(bad))
        raise NumericalInstabilityError(f"non-finite score for triple {(h, r, t)} at feature {k}", (h, r, t), k)
    return dict(h=h, r=r, t=t, la=la, lb=lb, lu=lu, lv=lv, p=p, q=q, g=g,
                per_feature=per_feature, pi=pi, score=float(pi @ per_feature))


def score(m: KsrModel, triple) -> float:
    """Log-space lower bound of the generative probability of ``triple``; higher is more plausible."""
    return _forward(m, triple)["score"]


def score_batch(m: KsrModel, heads, relations, tails) -> np.ndarray:
    """Vectorized :func:`score` over broadcastable index arrays."""
    heads, relations, tails = np.broadcast_arrays(np.asarray(heads), np.asarray(relations), np.asarray(tails))
    xa = m.entity_logits[heads]
    xb = m.rel_subj_logits[relations]
    xu = m.entity_logits[tails]
    xv = m.rel_obj_logits[relations]
    p = softmax(xa + xb, axis=-1)
    q = softmax(xu + xv, axis=-1)
    g = (-np.abs(p - q) / m.config.sigma + log_softmax(xa, axis=-1) + log_softmax(xb, axis=-1)
         + log_softmax(xu, axis=-1) + log_softmax(xv, axis=-1))
    pi = softmax(m.rel_feat_logits[relations], axis=-1)
    return np.sum(pi * logsumexp(g, axis=-1), axis=-1)


def _score_grad(m: KsrModel, triple) -> tuple[float, dict]:
    f = _forward(m, triple)
    sigma = m.config.sigma
    pi = f["pi"][:, None]
    rho = np.exp(f["g"] - f["per_feature"][:, None])
    p, q = f["p"], f["q"]
    beta = -rho * np.sign(p - q) / sigma
    dp = p * (beta - np.sum(p * beta, axis=-1, keepdims=True))
    dq = q * (beta - np.sum(q * beta, axis=-1, keepdims=True))
    grads: dict = {}

    def add(key, value):
        if key in grads:
            grads[key] = grads[key] + value
        else:
            grads[key] = value

    add(("entity", f["h"]), pi * (rho - np.exp(f["la"]) + dp))
    add(("entity", f["t"]), pi * (rho - np.exp(f["lu"]) - dq))
    add(("rel_subj", f["r"]), pi * (rho - np.exp(f["lb"]) + dp))
    add(("rel_obj", f["r"]), pi * (rho - np.exp(f["lv"]) - dq))
    add(("rel_feat", f["r"]), f["pi"] * (f["per_feature"] - f["score"]))
    return f["score"], grads


def score_gradient(m: KsrModel, positive, negative, gamma: float) -> dict:
    """Gradient of ``max(0, gamma - score(positive) + score(negative))``.

    Keys are ``(table, row)`` with table in ``entity``, ``rel_subj``,
    ``rel_obj``, ``rel_feat``; values have the row's shape. Empty when the
    hinge is inactive.
    """
    s_pos, g_pos = _score_grad(m, positive)
    s_neg, g_neg = _score_grad(m, negative)
    if gamma - s_pos + s_neg <= 0:
        return {}
    out = {key: -value for key, value in g_pos.items()}
    for key, value in g_neg.items():
        out[key] = out[key] + value if key in out else value
    return out


_TABLE_OF_KEY = {"entity": "entity_logits", "rel_subj": "rel_subj_logits",
                 "rel_obj": "rel_obj_logits", "rel_feat": "rel_feat_logits"}


def apply_gradient(m: KsrModel, grads: dict, alpha: float) -> None:
    for (table, row), value in grads.items():
        getattr(m, _TABLE_OF_KEY[table])[row] -= alpha * value


@dataclass(frozen=True)
class SemanticCode:
    categories: tuple[int, ...]

    def __len__(self):
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    def __getitem__(self, i):
        return self.categories[i]


def infer_entity_code(m: KsrModel, e: int) -> SemanticCode:
    # np.argmax returns the first maximum, which is the lowest-index tie-break
    return SemanticCode(tuple(int(c) for c in np.argmax(softmax(m.entity_logits[e], axis=-1), axis=-1)))


def infer_relation_code(m: KsrModel, r: int) -> SemanticCode:
    joint = softmax(m.rel_subj_logits[r], axis=-1) * softmax(m.rel_obj_logits[r], axis=-1)
    return SemanticCode(tuple(int(c) for c in np.argmax(joint, axis=-1)))


def entity_codes(m: KsrModel) -> np.ndarray:
    """(E, n) matrix of entity codes."""
    return np.argmax(m.entity_probs(), axis=-1)


def _expected_shapes(n, d, E, R):
    return [(E, n, d), (R, n, d), (R, n, d), (R, n)]


def save_model(m: KsrModel, path: str | Path, provenance: dict | None = None) -> Path:
    """Write the binary model file and its ``.meta`` sidecar.

    Layout (little-endian): magic ``KSR1``, u32 version, u32 n, d, E, R,
    f64 sigma, i64 seed; then per table a u32 ndim, u32 dims and float64 data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = m.config
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, cfg.n, cfg.d, m.num_entities, m.num_relations,
                             float(cfg.sigma), int(cfg.seed)))
        for name in TABLE_NAMES:
            arr = np.ascontiguousarray(getattr(m, name), dtype="<f8")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    lines = [f"format=KSR1 v{FORMAT_VERSION}", f"n={cfg.n}", f"d={cfg.d}", f"sigma={cfg.sigma!r}",
             f"seed={cfg.seed}", f"entities={m.num_entities}", f"relations={m.num_relations}"]
    for name in TABLE_NAMES:
        lines.append(f"{name}.shape={'x'.join(map(str, getattr(m, name).shape))}")
    for key, value in {**m.meta, **(provenance or {})}.items():
        lines.append(f"{key}={value}")
    path.with_suffix(".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_model(path: str | Path) -> KsrModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"{path}: truncated header: expected {_HEADER.size} bytes, got {len(data)}")
    magic, version, n, d, E, R, sigma, seed = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    offset = _HEADER.size
    tables = []
    for name, expected in zip(TABLE_NAMES, _expected_shapes(n, d, E, R)):
        if len(data) < offset + 4:
            raise ModelFormatError(f"{path}: truncated before {name}")
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if len(data) < offset + 4 * ndim:
            raise ModelFormatError(f"{path}: truncated in {name} layout record")
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        if tuple(shape) != expected:
            raise ModelFormatError(
                f"{path}: dimension mismatch in {name}: header implies {expected}, table records {tuple(shape)}"
            )
        nbytes = 8 * int(np.prod(shape))
        available = len(data) - offset
        if available < nbytes:
            raise ModelFormatError(
                f"{path}: truncated {name}: expected {nbytes} bytes, got {available}"
            )
        tables.append(np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64))
        offset += nbytes
    if offset != len(data):
        raise ModelFormatError(f"{path}: {len(data) - offset} trailing bytes after tables")
    return KsrModel(*tables, config=ModelConfig(n=n, d=d, sigma=sigma, seed=seed))
