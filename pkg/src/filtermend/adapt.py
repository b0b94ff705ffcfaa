"""Filter reconstruction: classify filters, fit replacements, patch responses.

Each filter is regressed on every filter of the same layer (itself
included) with a KL-weighted Lasso path.  A filter whose own coefficient is
zero at the chosen lambda is *bad*; its response is replaced at inference by
an OLS fit on good filters selected from the path.
"""
import json
import logging
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .divergence import build_histogram, filter_kl_scores, kl_divergence
from .errors import (
    CollinearityError,
    DimensionError,
    FormatError,
    NoReconstructionBasisError,
    UnreconstructableError,
)
from .sparse_select import GramSystem, kl_weights, lambda_path, ols_refit, select_lambda
from .tensor import ResponseTensor, to_sample_matrix

log = logging.getLogger(__name__)

MODEL_MAGIC = b"FREC"
MODEL_VERSION = 1


class FingerprintMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AdaptConfig:
    bins: int = 64
    alpha: float = 1.0
    weight_floor: float = 1e-3
    grid_size: int = 50
    grid_ratio: float = 1e-3
    seed: int = 0
    layer: int = 1
    stage: str = "pre"
    max_source_rows: int = 200_000
    holdout_frac: float = 0.2
    relaxed: bool = True

    def fingerprint(self):
        return ";".join(f"{k}={v}" for k, v in asdict(self).items())


@dataclass(eq=False)
class ReconstructionModel:
    layer_index: int
    n_filters: int
    bad_filters: tuple
    selected: dict  # bad filter -> tuple of predictor filters
    coefficients: dict  # bad filter -> float64 array aligned with selected
    intercepts: dict  # bad filter -> float
    fingerprint: str
    kl: np.ndarray = None
    stage: str = "pre"
    unpatched: tuple = ()
    lambdas: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict, repr=False)  # not persisted

    def __post_init__(self):
        self.bad_filters = tuple(sorted(int(j) for j in self.bad_filters))
        bad = set(self.bad_filters) | set(self.unpatched)
        for l in self.bad_filters:
            sel = self.selected[l]
            if not sel:
                raise ValueError(f"bad filter {l} has an empty predictor set")
            if any(not 0 <= k < self.n_filters for k in sel):
                raise ValueError(f"bad filter {l} references an invalid filter index")
            if bad.intersection(sel):
                raise ValueError(f"bad filter {l} is predicted from another bad filter")
            if len(self.coefficients[l]) != len(sel):
                raise ValueError(f"coefficient count mismatch for filter {l}")

    @property
    def good_filters(self):
        bad = set(self.bad_filters)
        return tuple(j for j in range(self.n_filters) if j not in bad)


def _n_workers():
    env = os.environ.get("FILTERMEND_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map(fn, items):
    items = list(items)
    workers = min(_n_workers(), max(len(items), 1))
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _split_rows(n, config):
    rng = np.random.default_rng([config.seed, 11])
    rows = np.arange(n)
    if n > config.max_source_rows:
        rows = np.sort(rng.choice(n, config.max_source_rows, replace=False))
    perm = rng.permutation(rows.size)
    n_hold = max(1, int(round(config.holdout_frac * rows.size)))
    return np.sort(rows[perm[n_hold:]]), np.sort(rows[perm[:n_hold]])


def fit_reconstruction(source_resp, target_resp, config=None):
    """Fit a :class:`ReconstructionModel` from source and target layer outputs."""
    config = config or AdaptConfig()
    src_t = source_resp if isinstance(source_resp, ResponseTensor) else ResponseTensor(source_resp)
    tgt_t = target_resp if isinstance(target_resp, ResponseTensor) else ResponseTensor(target_resp)
    if src_t.dims[1:] != tgt_t.dims[1:]:
        axis = "filters" if src_t.dims[1] != tgt_t.dims[1] else "spatial"
        raise DimensionError(f"source dims {src_t.dims} and target dims {tgt_t.dims} disagree", axis=axis)
    S = to_sample_matrix(src_t).values
    T = to_sample_matrix(tgt_t).values
    p = S.shape[1]

    report = filter_kl_scores(S, T, config.bins, config.alpha)
    weights = kl_weights(report.kl, config.weight_floor)
    train_rows, hold_rows = _split_rows(S.shape[0], config)
    S_train, S_hold = S[train_rows], S[hold_rows]
    shared = GramSystem.shared(S_train)
    source_hists = [build_histogram(S_train[:, l], report.edges[l], config.alpha) for l in range(p)]
    model_warnings = []

    def classify(l):
        if shared.scale[l] == 0:
            return False, None, None
        path = lambda_path(None, None, weights, config.grid_size, config.grid_ratio, system=shared.for_column(l))
        try:
            k = select_lambda(path, (S_hold, S_hold[:, l]), T, source_hists[l], report.kl[l], config.weight_floor,
                              config.alpha, relaxed=config.relaxed)
        except UnreconstructableError:
            return False, None, path
        return path.solutions[k].beta_std[l] == 0.0, k, path

    first = _map(classify, range(p))
    bad = [l for l in range(p) if first[l][0]]
    good = [l for l in range(p) if not first[l][0]]
    if not good:
        raise NoReconstructionBasisError("every filter was classified bad; no reconstruction basis")

    good_idx = np.asarray(good, dtype=np.intp)
    restricted = shared.restrict(good_idx)

    def reconstruct(l):
        sys_l = GramSystem(
            restricted.n, restricted.mean, restricted.scale, restricted.gram,
            shared.gram[good_idx, l] * shared.scale[l], float(shared.gram[l, l] * shared.scale[l] ** 2),
            float(shared.mean[l]),
        )
        path = lambda_path(None, None, weights[good_idx], config.grid_size, config.grid_ratio, system=sys_l)
        try:
            k = select_lambda(path, (S_hold, S_hold[:, l]), T, source_hists[l], report.kl[l], config.weight_floor,
                              config.alpha, predictors=good_idx, relaxed=config.relaxed)
        except UnreconstructableError:
            return None, f"filter {l}: unreconstructable (empty active set at every lambda); left unpatched", path
        chosen = tuple(int(good_idx[j]) for j in path.solutions[k].active_set)
        try:
            coef, icpt = ols_refit(S_train[:, chosen], S_train[:, l])
        except CollinearityError as exc:
            return None, f"filter {l}: OLS refit failed ({exc}); left unpatched", path
        pred = T[:, chosen] @ coef + icpt
        repaired = kl_divergence(build_histogram(pred, report.edges[l], config.alpha), source_hists[l])
        raw = kl_divergence(build_histogram(T[:, l], report.edges[l], config.alpha), source_hists[l])
        if repaired > raw:
            return None, (f"filter {l}: reconstruction raises divergence ({repaired:.6f} > {raw:.6f}); "
                          "left unpatched"), path
        return (chosen, coef, icpt, float(path.lambdas[k])), None, path

    second = _map(reconstruct, bad)
    patched, unpatched = [], []
    selected, coefs, icpts, lambdas, diagnostics = {}, {}, {}, {}, {}
    for l in range(p):
        if first[l][2] is not None:
            diagnostics[l] = first[l][2]
    for l, (fit, warning, path) in zip(bad, second):
        diagnostics[l] = path
        if fit is None:
            model_warnings.append(warning)
            log.warning(warning)
            unpatched.append(l)
            continue
        patched.append(l)
        selected[l], coefs[l], icpts[l], lambdas[l] = fit[0], fit[1], fit[2], fit[3]
    return ReconstructionModel(
        layer_index=config.layer,
        n_filters=p,
        bad_filters=tuple(patched),
        selected=selected,
        coefficients=coefs,
        intercepts=icpts,
        fingerprint=config.fingerprint(),
        kl=report.kl.copy(),
        stage=config.stage,
        unpatched=tuple(unpatched),
        lambdas=lambdas,
        warnings=model_warnings,
        diagnostics={"paths": diagnostics, "report": report},
    )


def patch_array(data, model):
    """Replace bad-filter maps in a raw ``(N, F, H, W)`` array."""
    if data.shape[1] != model.n_filters:
        raise DimensionError(
            f"tensor has {data.shape[1]} filters, model expects {model.n_filters}", axis="filters"
        )
    out = np.array(data, dtype=np.float64, copy=True)
    for l in model.bad_filters:
        sel = list(model.selected[l])
        out[:, l] = np.tensordot(model.coefficients[l], data[:, sel], axes=([0], [1])) + model.intercepts[l]
    return out


def patch_responses(target_resp, model):
    data = target_resp.data if isinstance(target_resp, ResponseTensor) else np.asarray(target_resp)
    return ResponseTensor(patch_array(data, model))


def adapted_forward(net, images, model):
    """Class scores with the model's layer output patched before the rest of the net."""
    from .net import forward

    if net.n_filters(model.layer_index) != model.n_filters:
        raise DimensionError("model filter count does not match the network layer", axis="filters")
    if not model.bad_filters:
        return forward(net, images)
    return forward(net, images, hook=(model.layer_index, model.stage, lambda z: patch_array(z, model)))


# ---------------------------------------------------------------------------
# FREC file format (little-endian):
#   magic "FREC", u16 version, u16 layer_index, u16 n_filters,
#   bad-filter bitmap (ceil(n/8) bytes, LSB first),
#   per bad filter ascending: u16 count, u16 indices[count],
#       f64 coefficients[count], f64 intercept
#   u32 length + UTF-8 config fingerprint
#   u32 length + UTF-8 JSON extras (KL snapshot, stage, lambdas, warnings)
# ---------------------------------------------------------------------------


def _encode_model(model):
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<HHH", MODEL_VERSION, model.layer_index, model.n_filters)
    bitmap = bytearray((model.n_filters + 7) // 8)
    for l in model.bad_filters:
        bitmap[l // 8] |= 1 << (l % 8)
    out += bitmap
    for l in model.bad_filters:
        sel = model.selected[l]
        out += struct.pack(f"<H{len(sel)}H", len(sel), *sel)
        out += np.asarray(model.coefficients[l], dtype="<f8").tobytes()
        out += struct.pack("<d", model.intercepts[l])
    fp = model.fingerprint.encode("utf-8")
    out += struct.pack("<I", len(fp)) + fp
    extras = {
        "kl": None if model.kl is None else [float(v) for v in model.kl],
        "stage": model.stage,
        "unpatched": list(model.unpatched),
        "lambdas": {str(k): float(v) for k, v in sorted(model.lambdas.items())},
        "warnings": list(model.warnings),
    }
    blob = json.dumps(extras, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    return bytes(out)


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(_encode_model(model))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError(f"model file truncated at byte {self.pos} (needed {size} more)")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def bytes(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"model file truncated at byte {self.pos} (needed {n} more)")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk


def load_model(path, expected_fingerprint=None):
    """Read a FREC file; warn when ``expected_fingerprint`` differs from the stored one."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"not a FREC model file: magic {raw[:4]!r}, expected {MODEL_MAGIC!r}")
    rd = _Reader(raw)
    rd.pos = 4
    version, layer, n_filters = rd.take("<HHH")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported FREC version {version}, expected {MODEL_VERSION}")
    bitmap = rd.bytes((n_filters + 7) // 8)
    bad = [l for l in range(n_filters) if bitmap[l // 8] >> (l % 8) & 1]
    selected, coefs, icpts = {}, {}, {}
    for l in bad:
        (count,) = rd.take("<H")
        selected[l] = tuple(rd.take(f"<{count}H"))
        coefs[l] = np.array(rd.take(f"<{count}d"), dtype=np.float64)
        (icpts[l],) = rd.take("<d")
    (fp_len,) = rd.take("<I")
    try:
        fingerprint = rd.bytes(fp_len).decode("utf-8")
        (ex_len,) = rd.take("<I")
        extras = json.loads(rd.bytes(ex_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"model file metadata is corrupt: {exc}") from exc
    if rd.pos != len(raw):
        raise FormatError(f"model file has {len(raw) - rd.pos} trailing bytes")
    if expected_fingerprint is not None and expected_fingerprint != fingerprint:
        warnings.warn(
            f"model fingerprint {fingerprint!r} differs from pipeline {expected_fingerprint!r}",
            FingerprintMismatchWarning,
            stacklevel=2,
        )
    return ReconstructionModel(
        layer_index=layer,
        n_filters=n_filters,
        bad_filters=tuple(bad),
        selected=selected,
        coefficients=coefs,
        intercepts=icpts,
        fingerprint=fingerprint,
        kl=None if extras.get("kl") is None else np.array(extras["kl"]),
        stage=extras.get("stage", "pre"),
        unpatched=tuple(extras.get("unpatched", ())),
        lambdas={int(k): v for k, v in extras.get("lambdas", {}).items()},
        warnings=list(extras.get("warnings", [])),
    )
