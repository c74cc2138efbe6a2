"""Checkpoints, calibration tokens, run configs, mask sets, quantized exports, reports.

Checkpoint layout (a directory)::

    manifest.json   config, block count, vocab and one entry per tensor
                    {name, shape, dtype, offset, nbytes, crc32}
    tensors.bin     little-endian float64, row-major, concatenated

Every file written here carries ``format_version``.
"""
from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptCheckpointError, DataError, MaskError
from .hwsim import SimConfig
from .model import GAINS, PRUNABLE, BlockConfig, BlockWeights, ModelCheckpoint
from .pruner import PruneConfig
from .quant import QuantState
from .sparsity import PruneMask

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
MASK_MANIFEST = "masks.json"
QUANT_MANIFEST = "quant.json"
QUANT_MAGIC = b"BPQUANT\x00"
_QUANT_HEADER = struct.Struct("<8sIII")

DESK_SCALE = (16, 128)
FULL_SCALE = (128, 2048)


# ------------------------------------------------------------ checkpoints

def _tensor_items(ckpt: ModelCheckpoint):
    yield "embed", ckpt.embed.data
    yield "head", ckpt.head.data
    yield "final_norm_gain", ckpt.final_norm_gain.data
    for i, blk in enumerate(ckpt.blocks):
        for name in PRUNABLE + GAINS:
            yield f"blocks.{i}.{name}", getattr(blk, name).data


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(root / BLOB, "wb") as fh:
        for name, arr in _tensor_items(ckpt):
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset,
                            "nbytes": len(raw), "crc32": zlib.crc32(raw)})
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(ckpt.config),
        "n_blocks": ckpt.n_blocks,
        "vocab": ckpt.vocab,
        "meta": ckpt.meta,
        "blob": BLOB,
        "blob_bytes": offset,
        "tensors": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _read_manifest(path: Path, name: str) -> dict:
    try:
        m = json.loads((path / name).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: missing {name}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path / name}: invalid JSON ({e})") from None
    if m.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path / name}: unsupported format_version {m.get('format_version')!r}")
    return m


def load_checkpoint(path) -> ModelCheckpoint:
    root = Path(path)
    m = _read_manifest(root, MANIFEST)
    blob_path = root / m.get("blob", BLOB)
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise CorruptCheckpointError(f"{blob_path}: missing tensor blob") from None
    if len(blob) != m["blob_bytes"]:
        raise CorruptCheckpointError(f"{blob_path}: expected {m['blob_bytes']} bytes, found {len(blob)}")

    spans = sorted((e["offset"], e["offset"] + e["nbytes"], e["name"]) for e in m["tensors"])
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CorruptCheckpointError(f"tensors {an} and {bn} overlap in the blob")
    if spans and spans[-1][1] > len(blob):
        raise CorruptCheckpointError(f"tensor {spans[-1][2]} runs past the end of the blob")

    tensors = {}
    for e in m["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if e.get("dtype") != "<f8":
            raise CorruptCheckpointError(f"{e['name']}: unsupported dtype {e.get('dtype')!r}")
        if zlib.crc32(raw) != e["crc32"]:
            raise CorruptCheckpointError(f"{e['name']}: checksum mismatch")
        if len(raw) != 8 * int(np.prod(e["shape"], dtype=np.int64)):
            raise CorruptCheckpointError(f"{e['name']}: shape {e['shape']} does not match {len(raw)} bytes")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)

    try:
        cfg = BlockConfig(**m["config"])
    except TypeError as e:
        raise CorruptCheckpointError(f"bad block config in manifest: {e}") from None

    def need(name):
        if name not in tensors:
            raise CorruptCheckpointError(f"missing tensor {name}")
        return tensors[name]

    blocks = []
    for i in range(m["n_blocks"]):
        vals = [need(f"blocks.{i}.{n}") for n in PRUNABLE + GAINS]
        try:
            blocks.append(BlockWeights(cfg, *vals))
        except ValueError as e:
            raise CorruptCheckpointError(f"blocks.{i}: {e}") from None
    try:
        return ModelCheckpoint(cfg, blocks, need("embed"), need("head"), need("final_norm_gain"), m.get("meta", {}))
    except ValueError as e:
        raise CorruptCheckpointError(str(e)) from None


def synth_model(config: BlockConfig = BlockConfig(), n_blocks: int = 4, vocab: int = 256, seed: int = 0) -> ModelCheckpoint:
    """Deterministic random model: matrices ~ N(0, 1/fan_in), unit norm gains, N(0, 1) embeddings."""
    rng = np.random.default_rng(seed)
    shapes = config.layer_shapes()
    blocks = []
    for _ in range(n_blocks):
        mats = [rng.standard_normal(shapes[n]) / np.sqrt(shapes[n][1]) for n in PRUNABLE]
        blocks.append(BlockWeights(config, *mats, np.ones(config.d_model), np.ones(config.d_model)))
    embed = rng.standard_normal((vocab, config.d_model))
    head = rng.standard_normal((vocab, config.d_model)) / np.sqrt(config.d_model)
    return ModelCheckpoint(config, blocks, embed, head, np.ones(config.d_model),
                           {"source": "synthetic", "seed": seed})


# ------------------------------------------------------------ calibration

@dataclass
class CalibrationSet:
    tokens: np.ndarray  # uint32 [n_sequences, seq_len]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 2 or t.size == 0:
            raise DataError(f"calibration tokens must be a non-empty [n, seq_len] array, got {t.shape}")
        self.tokens = t.astype(np.uint32)

    @property
    def n_sequences(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


def markov_transitions(vocab: int = 256, seed: int = 0, concentration: float = 0.05) -> np.ndarray:
    """Row-stochastic order-1 transition matrix with peaked (low-entropy) rows."""
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.full(vocab, concentration), size=vocab)


def markov_tokens(n_sequences: int, seq_len: int, vocab: int = 256, chain_seed: int = 0,
                  sample_seed: int = 0) -> np.ndarray:
    if n_sequences < 1 or seq_len < 1:
        raise DataError("n_sequences and seq_len must be >= 1")
    trans = markov_transitions(vocab, chain_seed)
    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    rng = np.random.default_rng(sample_seed)
    out = np.empty((n_sequences, seq_len), dtype=np.uint32)
    state = rng.integers(0, vocab, n_sequences)
    out[:, 0] = state
    u = rng.random((n_sequences, seq_len - 1))
    for t in range(1, seq_len):
        state = np.minimum((cdf[state] < u[:, t - 1, None]).sum(axis=1), vocab - 1)
        out[:, t] = state
    return out


def synthetic_calibration(n_sequences: int, seq_len: int, vocab: int = 256, seed: int = 0,
                          chain_seed: int = 0) -> CalibrationSet:
    toks = markov_tokens(n_sequences, seq_len, vocab, chain_seed, seed)
    return CalibrationSet(toks, {"source": "synthetic", "chain_seed": chain_seed, "seed": seed, "vocab": vocab})


def save_tokens(tokens, path) -> None:
    np.ascontiguousarray(tokens, dtype="<u4").tofile(path)


def load_token_file(path, seq_len: int, n_sequences: int | None = None) -> CalibrationSet:
    """Raw little-endian uint32 token ids, cut into consecutive ``seq_len`` windows."""
    try:
        raw = np.fromfile(path, dtype="<u4")
    except FileNotFoundError:
        raise DataError(f"{path}: no such token file") from None
    n_avail = raw.size // seq_len
    n = n_avail if n_sequences is None else n_sequences
    if n < 1 or n > n_avail:
        raise DataError(f"{path}: {raw.size} tokens cannot supply {n} sequences of {seq_len}")
    toks = raw[:n * seq_len].reshape(n, seq_len)
    return CalibrationSet(toks, {"source": "file", "path": str(path)})


# ------------------------------------------------------------- run config

@dataclass
class RunConfig:
    """Flat, documented key set covering pruning, quantization and simulation."""

    prune: PruneConfig = field(default_factory=PruneConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    model_seed: int = 0
    n_blocks: int = 4
    vocab: int = 256
    chain_seed: int = 0
    eval_sequences: int = 8

    _RUN_KEYS = ("model_seed", "n_blocks", "vocab", "chain_seed", "eval_sequences")

    @classmethod
    def keys(cls) -> list[str]:
        return ([f.name for f in fields(PruneConfig)] + [f.name for f in fields(SimConfig)]
                + list(cls._RUN_KEYS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        pk = {f.name for f in fields(PruneConfig)}
        sk = {f.name for f in fields(SimConfig)}
        try:
            prune = PruneConfig(**{k: v for k, v in d.items() if k in pk})
            sim = SimConfig(**{k: v for k, v in d.items() if k in sk})
        except TypeError as e:
            raise ConfigError(str(e)) from None
        run = {k: d[k] for k in cls._RUN_KEYS if k in d}
        return cls(prune, sim, **run)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such config file") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self.prune)
        d.update(asdict(self.sim))
        d.update({k: getattr(self, k) for k in self._RUN_KEYS})
        return d

    def updated(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)


# --------------------------------------------------------------- mask sets

def mask_filename(block: int, layer: str) -> str:
    return f"block{block}.{layer}.mask"


def save_mask_set(masks: list[dict[str, PruneMask]], out_dir) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    zeros = total = 0
    for i, ms in enumerate(masks):
        for name in PRUNABLE:
            fn = mask_filename(i, name)
            ms[name].save(root / fn)
            files[f"blocks.{i}.{name}"] = {"file": fn, "shape": list(ms[name].shape),
                                           "sparsity": ms[name].achieved_sparsity}
            zeros += ms[name].zero_count
            total += ms[name].shape[0] * ms[name].shape[1]
    manifest = {"format_version": FORMAT_VERSION, "n_blocks": len(masks), "layers": list(PRUNABLE),
                "global_sparsity": zeros / total if total else 0.0, "files": files}
    (root / MASK_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_mask_set(mask_dir) -> list[dict[str, PruneMask]]:
    root = Path(mask_dir)
    m = _read_manifest(root, MASK_MANIFEST)
    out = []
    for i in range(m["n_blocks"]):
        ms = {}
        for name in PRUNABLE:
            key = f"blocks.{i}.{name}"
            if key not in m["files"]:
                raise MaskError(f"mask manifest has no entry for {key}")
            try:
                ms[name] = PruneMask.load(root / m["files"][key]["file"], name)
            except FileNotFoundError:
                raise MaskError(f"missing mask file for {key}") from None
        out.append(ms)
    return out


# --------------------------------------------------------- quant export

def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    c = np.ascontiguousarray(codes, dtype="<u2").reshape(-1)
    bitplanes = np.unpackbits(c.view(np.uint8).reshape(-1, 2), axis=1, bitorder="little")[:, :bits]
    return np.packbits(bitplanes.reshape(-1), bitorder="little").tobytes()


def _unpack_codes(raw: bytes, count: int, bits: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:count * bits]
    weights = (1 << np.arange(bits)).astype(np.int64)
    return flat.reshape(count, bits).astype(np.int64) @ weights


def export_quant(state: QuantState, path, weight: np.ndarray | None = None) -> None:
    """Write ``magic, out, in, bits, h f64[out], z i32[out], packed codes``.

    Pass-through channels (constant rows) are stored exactly when ``weight`` is
    given: a row of value c becomes ``h = |c|`` with one code, and a zero row ``h = 0``.
    """
    codes = np.asarray(state.codes, dtype=np.int64).copy()
    h = np.asarray(state.scale, dtype=np.float64).copy()
    z = np.asarray(state.zero_point, dtype=np.int64).copy()
    out, inn = codes.shape
    pt = state.passthrough if state.passthrough.size else np.zeros(out, dtype=bool)
    for r in np.flatnonzero(pt):
        c = 0.0 if weight is None else float(weight[r, 0])
        h[r] = abs(c)
        z[r] = 1 if c < 0 else 0
        codes[r] = 0 if c < 0 else (1 if c > 0 else 0)
    with open(path, "wb") as fh:
        fh.write(_QUANT_HEADER.pack(QUANT_MAGIC, out, inn, state.bits))
        fh.write(h.astype("<f8").tobytes())
        fh.write(z.astype("<i4").tobytes())
        fh.write(_pack_codes(codes, state.bits))


def import_quant(path) -> QuantState:
    raw = Path(path).read_bytes()
    if len(raw) < _QUANT_HEADER.size:
        raise DataError(f"{path}: truncated quant header")
    magic, out, inn, bits = _QUANT_HEADER.unpack_from(raw)
    if magic != QUANT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if not 2 <= bits <= 8:
        raise DataError(f"{path}: bits {bits} outside [2, 8]")
    pos = _QUANT_HEADER.size
    need = pos + 8 * out + 4 * out + (out * inn * bits + 7) // 8
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(raw)}")
    h = np.frombuffer(raw, dtype="<f8", count=out, offset=pos).astype(np.float64)
    pos += 8 * out
    z = np.frombuffer(raw, dtype="<i4", count=out, offset=pos).astype(np.int64)
    pos += 4 * out
    codes = _unpack_codes(raw[pos:], out * inn, bits).reshape(out, inn)
    return QuantState(int(bits), h, z.astype(np.float64), codes, np.zeros(out, dtype=bool))


def save_quant_set(states: list[dict[str, QuantState]], out_dir, weights=None, mask_dir=None) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, qs in enumerate(states):
        for name in PRUNABLE:
            fn = f"block{i}.{name}.q"
            w = None if weights is None else weights[i][name]
            export_quant(qs[name], root / fn, w)
            entry = {"file": fn, "bits": qs[name].bits,
                     "passthrough_channels": int(qs[name].passthrough.sum())}
            if mask_dir is not None:
                entry["mask"] = str(Path(mask_dir) / mask_filename(i, name))
            files[f"blocks.{i}.{name}"] = entry
    manifest = {"format_version": FORMAT_VERSION, "n_blocks": len(states), "files": files}
    (root / QUANT_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_quant_set(quant_dir) -> list[dict[str, QuantState]]:
    root = Path(quant_dir)
    m = _read_manifest(root, QUANT_MANIFEST)
    return [{n: import_quant(root / m["files"][f"blocks.{i}.{n}"]["file"]) for n in PRUNABLE}
            for i in range(m["n_blocks"])]


# ------------------------------------------------------------------ reports

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return repr(v)
    return v


def write_jsonl(path, records, kind: str) -> None:
    """One JSON object per line, headed by a ``{"record": "header", ...}`` line."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"record": "header", "kind": kind, "format_version": FORMAT_VERSION}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(_jsonable(r), sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"{path}: no such report") from None
    recs = [json.loads(line) for line in lines if line.strip()]
    if not recs or recs[0].get("record") != "header" or recs[0].get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: missing or unsupported report header")
    return recs


CURVE_COLUMNS = ("step", "loss", "recon", "penalty", "sparsity")


def write_curve_csv(path, curve: list[dict], extra: dict | None = None) -> None:
    extra = extra or {}
    cols = list(extra) + list(CURVE_COLUMNS)
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in curve:
            w.writerow([extra[k] for k in extra] + [repr(float(r[c])) if c != "step" else r[c] for c in CURVE_COLUMNS])


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# format_version="):
            raise DataError(f"{path}: missing format_version line")
        return [dict(row) for row in csv.DictReader(fh)]
