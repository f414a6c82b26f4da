"""Synthetic image-text pairs with a planted correspondence at every scale.

Each pair owns one latent vector ``z_s`` per scale. The image is a sum of
per-scale layers: a fixed carrier pattern made of ``2^s``-pixel blocks,
coloured by a fixed linear map of ``z_s``, plus Gaussian noise. The text
carries, for every scale, the token obtained by snapping ``z_s`` to the
nearest centre of that scale's codebook, mixed with filler tokens at random
positions and right-padded with id 0.

Everything random is drawn from one ``numpy`` generator seeded by
``SynthSpec.seed``, so a spec always produces byte-identical files.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import TextBatch
from .errors import InputError, SpecError
from .formats import atomic_write_text, read_features, write_features

PAD_ID = 0
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthSpec:
    pairs: int = 704
    n_scales: int = 4
    latent_dim: int = 2
    channels: int = 8
    height: int = 16
    width: int = 16
    text_len: int = 12
    vocab: int = 256
    scale_vocab: int = 16
    ranges: tuple = ()            # per-scale (start, stop); derived when empty
    noise: float = 0.5
    carrier_depth: float = 0.5
    split_sizes: tuple = ()       # (train, val, test); 70/10/20 when empty
    seed: int = 0

    def __post_init__(self):
        if not self.ranges:
            v = self.scale_vocab
            object.__setattr__(self, "ranges", tuple(
                (1 + s * v, 1 + (s + 1) * v) for s in range(self.n_scales)))
        ranges = tuple(tuple(int(x) for x in r) for r in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        if len(ranges) != self.n_scales:
            raise SpecError(f"{len(ranges)} vocab ranges for {self.n_scales} scales")
        ordered = sorted(ranges)
        for (a0, a1), (b0, _) in zip(ordered, ordered[1:]):
            if b0 < a1:
                raise SpecError(f"vocab ranges {(a0, a1)} and {(b0, _)} overlap")
        for a, b in ranges:
            if not (1 <= a < b <= self.vocab):
                raise SpecError(f"vocab range {(a, b)} must lie in [1, {self.vocab}) and be nonempty")
        if self.text_len < self.n_scales:
            raise SpecError(f"text_len {self.text_len} cannot hold {self.n_scales} scale tokens")
        if self.noise < 0:
            raise SpecError(f"noise must be >= 0, got {self.noise}")
        if self.split_sizes:
            sizes = tuple(int(s) for s in self.split_sizes)
            if len(sizes) != 3 or sum(sizes) != self.pairs or min(sizes) < 1:
                raise SpecError(f"split_sizes {sizes} must be 3 positive counts summing to {self.pairs}")
            object.__setattr__(self, "split_sizes", sizes)

    @property
    def filler_range(self):
        top = max(b for _, b in self.ranges)
        return (top, self.vocab) if top < self.vocab else (1, self.vocab)

    def sizes(self):
        if self.split_sizes:
            return self.split_sizes
        n_train = int(round(0.7 * self.pairs))
        n_val = int(round(0.1 * self.pairs))
        return (n_train, n_val, self.pairs - n_train - n_val)


@dataclass
class PairSplit:
    images: np.ndarray       # N x c x h x w
    tokens: np.ndarray       # N x p (int, PAD_ID = padding)
    latents: np.ndarray      # N x n x k
    text_owner: np.ndarray = None   # image index of every text

    def __post_init__(self):
        if self.text_owner is None:
            self.text_owner = np.arange(len(self.tokens))

    def __len__(self):
        return len(self.images)

    @property
    def mask(self):
        return self.tokens != PAD_ID

    def text(self, idx=None) -> TextBatch:
        tok = self.tokens if idx is None else self.tokens[idx]
        return TextBatch(tok, tok != PAD_ID)

    def subset(self, idx) -> "PairSplit":
        return PairSplit(self.images[idx], self.tokens[idx], self.latents[idx])


@dataclass
class SynthDataset:
    spec: SynthSpec
    train: PairSplit
    val: PairSplit
    test: PairSplit

    def split(self, name) -> PairSplit:
        if name not in SPLITS:
            raise InputError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class Generator:
    """The dataset-wide fixed structure: codebooks, colour maps, carriers."""
    spec: SynthSpec
    codebooks: tuple    # n x (V_s x k)
    colours: tuple      # n x (c x k)
    carriers: tuple     # n x (h x w)

    @classmethod
    def from_rng(cls, spec: SynthSpec, rng):
        k, c, h, w = spec.latent_dim, spec.channels, spec.height, spec.width
        codebooks, colours, carriers = [], [], []
        for s, (a, b) in enumerate(spec.ranges, 1):
            codebooks.append(rng.normal(size=(b - a, k)))
            colours.append(rng.normal(size=(c, k)) / np.sqrt(k))
            block = min(2 ** s, h, w)
            signs = rng.choice([-1.0, 1.0], size=(-(-h // block), -(-w // block)))
            pattern = np.kron(signs, np.ones((block, block)))[:h, :w]
            carriers.append(1.0 + spec.carrier_depth * pattern)
        return cls(spec, tuple(codebooks), tuple(colours), tuple(carriers))

    def scale_tokens(self, latents) -> np.ndarray:
        """Codebook token per scale for latents of shape N x n x k."""
        latents = np.asarray(latents, dtype=np.float64)
        out = np.empty(latents.shape[:2], dtype=np.int64)
        for s, (a, _) in enumerate(self.spec.ranges):
            d = ((latents[:, s, None, :] - self.codebooks[s][None]) ** 2).sum(-1)
            out[:, s] = a + d.argmin(axis=1)
        return out

    def render(self, latents, noise=None) -> np.ndarray:
        """Noise-free images (plus ``noise`` if given), N x c x h x w."""
        latents = np.asarray(latents, dtype=np.float64)
        img = np.zeros((len(latents), self.spec.channels, self.spec.height, self.spec.width))
        for s in range(self.spec.n_scales):
            colour = latents[:, s, :] @ self.colours[s].T
            img += colour[:, :, None, None] * self.carriers[s][None, None]
        if noise is not None:
            img += noise
        return img


def synth_dataset(spec: SynthSpec) -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    gen = Generator.from_rng(spec, rng)
    N, n, k, p = spec.pairs, spec.n_scales, spec.latent_dim, spec.text_len

    latents = rng.normal(size=(N, n, k))
    noise = spec.noise * rng.normal(size=(N, spec.channels, spec.height, spec.width))
    images = gen.render(latents, noise)

    scale_tok = gen.scale_tokens(latents)
    lo, hi = spec.filler_range
    lengths = rng.integers(n, p + 1, size=N)
    fillers = rng.integers(lo, hi, size=(N, p))
    tokens = np.full((N, p), PAD_ID, dtype=np.int64)
    for i in range(N):
        row = np.concatenate([scale_tok[i], fillers[i, : lengths[i] - n]])
        tokens[i, : lengths[i]] = row[rng.permutation(lengths[i])]

    order = rng.permutation(N)
    n_train, n_val, _ = spec.sizes()
    cuts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
            "test": order[n_train + n_val:]}
    splits = {name: PairSplit(images[idx], tokens[idx], latents[idx]) for name, idx in cuts.items()}
    return SynthDataset(spec, **splits)


# ---------------------------------------------------------------- files

def _spec_to_text(spec: SynthSpec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        val = getattr(spec, f.name)
        if f.name == "ranges":
            val = ";".join(f"{a}-{b}" for a, b in val)
        elif isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    lines.append(f"pad_id = {PAD_ID}")
    return "\n".join(lines) + "\n"


def _spec_from_text(text: str) -> SynthSpec:
    kv = {}
    for line in text.splitlines():
        if "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            kv[key] = val
    kwargs = {}
    for f in dataclasses.fields(SynthSpec):
        if f.name not in kv:
            raise SpecError(f"dataset meta is missing {f.name!r}")
        raw = kv[f.name]
        if f.name == "ranges":
            kwargs[f.name] = tuple(tuple(int(x) for x in r.split("-")) for r in raw.split(";") if r)
        elif f.name == "split_sizes":
            kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
        elif isinstance(f.default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return SynthSpec(**kwargs)


def save_dataset(ds: SynthDataset, root):
    root = Path(root)
    atomic_write_text(root / "meta.txt", _spec_to_text(ds.spec))
    for name in SPLITS:
        sp = ds.split(name)
        write_features(root / f"{name}.images.msaf", sp.images.reshape(len(sp), -1))
        write_features(root / f"{name}.latents.msaf", sp.latents.reshape(len(sp), -1))
        atomic_write_text(root / f"{name}.tokens.txt",
                          "".join(" ".join(map(str, row)) + "\n" for row in sp.tokens))


def load_dataset(root) -> SynthDataset:
    root = Path(root)
    spec = _spec_from_text((root / "meta.txt").read_text(encoding="utf-8"))
    shape = (spec.channels, spec.height, spec.width)
    splits = {}
    for name in SPLITS:
        images = read_features(root / f"{name}.images.msaf")
        latents = read_features(root / f"{name}.latents.msaf")
        lines = (root / f"{name}.tokens.txt").read_text(encoding="utf-8").split("\n")
        tokens = np.array([[int(t) for t in ln.split()] for ln in lines if ln.strip()], dtype=np.int64)
        splits[name] = PairSplit(images.reshape(-1, *shape), tokens.reshape(-1, spec.text_len),
                                 latents.reshape(-1, spec.n_scales, spec.latent_dim))
    return SynthDataset(spec, **splits)
