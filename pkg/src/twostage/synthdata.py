"""Synthetic class universes and few-shot tasks.

Each class owns a random token code (its vocabulary entry) and a latent
prototype derived from that code through a fixed random map.  Images are
latents rendered onto an ``h x w`` grid of ``f``-dimensional patches plus
pixel noise.  Classes flagged as "shifted" are rendered in a second domain:
a fixed per-feature gain and additive style pattern stand in for the look
of a downstream dataset the pretrained model never saw.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigurationError, FormatError, VersionError

DATA_FORMAT_VERSION = 1


@dataclass
class UniverseConfig:
    n_classes: int = 64
    latent_dim: int = 12
    samples_per_class: int = 40
    noise: float = 0.5
    latent_noise: float = 0.3
    grid: tuple[int, int, int] = (2, 2, 12)
    token_dim: int = 32
    n_shifted: int = 0
    shift: float = 0.0
    gain_jitter: float = 0.0
    n_groups: int = 0
    group_spread: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigurationError("a universe needs at least 2 classes")
        if self.latent_dim < 1 or self.samples_per_class < 1 or self.token_dim < 1:
            raise ConfigurationError("latent_dim, samples_per_class and token_dim must be positive")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigurationError(f"grid must be three positive extents, got {self.grid}")
        scales = (self.noise, self.latent_noise, self.shift, self.gain_jitter, self.group_spread)
        if min(scales) < 0:
            raise ConfigurationError("noise scales must be non-negative")
        if not 0 <= self.n_shifted <= self.n_classes:
            raise ConfigurationError("n_shifted must lie in [0, n_classes]")
        if self.n_groups < 0 or self.n_groups > self.n_classes:
            raise ConfigurationError("n_groups must lie in [0, n_classes]")


@dataclass
class Universe:
    config: UniverseConfig
    token_codes: np.ndarray  # (n_classes, token_dim)
    prototypes: np.ndarray   # (n_classes, latent_dim)
    latents: np.ndarray      # (n_samples, latent_dim)
    images: np.ndarray       # (n_samples, h, w, f)
    labels: np.ndarray       # (n_samples,)
    shifted: np.ndarray      # (n_classes,) bool

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.config.grid)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def source_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(~self.shifted)]

    def target_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.shifted)]


def make_universe(seed: int = 0, n_classes: int = 64, latent_dim: int = 12,
                  samples_per_class: int = 40, noise: float = 0.5, **kwargs) -> Universe:
    """Generate a universe deterministically from ``seed`` and the size parameters.

    Extra keyword arguments are forwarded to :class:`UniverseConfig`.  The last
    ``n_shifted`` class ids are rendered in the shifted domain.
    """
    cfg = UniverseConfig(n_classes=n_classes, latent_dim=latent_dim,
                         samples_per_class=samples_per_class, noise=noise, seed=seed, **kwargs)
    cfg.grid = tuple(int(g) for g in cfg.grid)
    return build_universe(cfg)


def build_universe(cfg: UniverseConfig) -> Universe:
    cfg.validate()
    h, w, f = cfg.grid
    n_patch = h * w
    # world and per-class streams are independent, so a class's samples do not
    # depend on how many other classes exist
    world = np.random.default_rng([cfg.seed, 0])
    code_to_latent = world.normal(size=(cfg.token_dim, cfg.latent_dim)) / math.sqrt(cfg.token_dim)
    render = world.normal(size=(n_patch, cfg.latent_dim, f)) / math.sqrt(cfg.latent_dim)
    style = world.normal(size=(n_patch, f))
    gain = np.exp(cfg.gain_jitter * world.normal(size=(n_patch, f)))
    centres = world.normal(size=(max(cfg.n_groups, 1), cfg.token_dim))

    class_rngs = [np.random.default_rng([cfg.seed, 1, c]) for c in range(cfg.n_classes)]
    codes = np.stack([r.normal(size=cfg.token_dim) for r in class_rngs])
    if cfg.n_groups:
        # fine-grained structure: classes share a group centre in code space
        group = np.arange(cfg.n_classes) % cfg.n_groups
        codes = centres[group] + cfg.group_spread * codes
    shifted = np.zeros(cfg.n_classes, dtype=bool)
    if cfg.n_shifted:
        shifted[cfg.n_classes - cfg.n_shifted:] = True
    prototypes = np.tanh(codes @ code_to_latent) * 1.5

    spc = cfg.samples_per_class
    labels = np.repeat(np.arange(cfg.n_classes), spc)
    latents = np.empty((cfg.n_classes * spc, cfg.latent_dim))
    images = np.empty((cfg.n_classes * spc, n_patch, f))
    for c, r in enumerate(class_rngs):
        sl = slice(c * spc, (c + 1) * spc)
        lat = prototypes[c] + cfg.latent_noise * r.normal(size=(spc, cfg.latent_dim))
        img = np.einsum("nz,pzf->npf", lat, render) + cfg.noise * r.normal(size=(spc, n_patch, f))
        if shifted[c]:
            img = img * gain + cfg.shift * style
        latents[sl], images[sl] = lat, img

    return Universe(config=cfg, token_codes=codes, prototypes=prototypes, latents=latents,
                    images=images.reshape(-1, h, w, f), labels=labels, shifted=shifted)


def split_base_novel(class_ids) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Base = first ceil(|C|/2) ids in ascending order, novel = the rest."""
    ids = sorted(int(c) for c in class_ids)
    if len(ids) != len(set(ids)):
        raise ArgumentError("class ids must be distinct")
    if len(ids) < 2:
        raise ArgumentError("need at least 2 classes to split")
    cut = math.ceil(len(ids) / 2)
    return tuple(ids[:cut]), tuple(ids[cut:])


@dataclass
class FewShotTask:
    base: tuple[int, ...]
    novel: tuple[int, ...]
    k: int
    shot_index: np.ndarray
    shot_images: np.ndarray
    shot_labels: np.ndarray
    eval_base_index: np.ndarray
    eval_base_images: np.ndarray
    eval_base_labels: np.ndarray
    eval_novel_index: np.ndarray
    eval_novel_images: np.ndarray
    eval_novel_labels: np.ndarray
    seed: int = 0

    @property
    def candidates(self) -> tuple[int, ...]:
        return tuple(sorted(self.base + self.novel))

    @property
    def n(self) -> int:
        return len(self.shot_labels)

    @property
    def protocol(self) -> str:
        return "all-to-all" if not self.novel else "base-to-novel"


def make_task(universe: Universe, classes, k: int, eval_per_class: int, seed: int = 0,
              mode: str = "base-to-novel") -> FewShotTask:
    """Draw k shots per base class without replacement; held-out samples fill the eval sets.

    ``mode`` is ``"base-to-novel"`` (half split) or ``"all-to-all"`` (every class is base).
    """
    classes = sorted(int(c) for c in classes)
    if mode == "base-to-novel":
        base, novel = split_base_novel(classes)
    elif mode == "all-to-all":
        if not classes:
            raise ArgumentError("all-to-all task needs at least one class")
        base, novel = tuple(classes), ()
    else:
        raise ArgumentError(f"unknown protocol {mode!r}")
    if k < 1 or eval_per_class < 1:
        raise ConfigurationError("k and eval_per_class must be positive")
    for c in classes:
        if not 0 <= c < universe.n_classes:
            raise ArgumentError(f"class {c} not in universe")

    rng = np.random.default_rng(seed)
    shots, eval_b, eval_n = [], [], []
    for c in classes:
        idx = universe.class_indices(c)
        need = k + eval_per_class if c in base else eval_per_class
        if len(idx) < need:
            raise ConfigurationError(f"class {c} has {len(idx)} samples, needs {need}")
        perm = rng.permutation(idx)
        if c in base:
            shots.append(np.sort(perm[:k]))
            eval_b.append(np.sort(perm[k:k + eval_per_class]))
        else:
            eval_n.append(np.sort(perm[:eval_per_class]))

    def cat(parts):
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    shot_index, eb, en = cat(shots), cat(eval_b), cat(eval_n)
    return FewShotTask(
        base=base, novel=novel, k=k,
        shot_index=shot_index, shot_images=universe.images[shot_index],
        shot_labels=universe.labels[shot_index],
        eval_base_index=eb, eval_base_images=universe.images[eb],
        eval_base_labels=universe.labels[eb],
        eval_novel_index=en, eval_novel_images=universe.images[en],
        eval_novel_labels=universe.labels[en],
        seed=seed,
    )


# -- benchmark profiles ----------------------------------------------------------
# Pretraining sees the unshifted source classes; downstream tasks use the
# shifted target classes, disjoint from pretraining by default.
PROFILES: dict[str, dict] = {
    "separable": {
        "universe": dict(n_classes=80, latent_dim=12, samples_per_class=40, noise=0.3,
                         latent_noise=0.2, grid=(2, 2, 12), n_shifted=16, shift=0.5,
                         gain_jitter=0.2, seed=0),
        "task": dict(k=4, eval_per_class=24),
    },
    "hard": {
        "universe": dict(n_classes=84, latent_dim=12, samples_per_class=40, noise=0.6,
                         latent_noise=0.4, grid=(2, 2, 12), n_shifted=20, shift=2.0,
                         gain_jitter=0.0, n_groups=5, group_spread=0.5, seed=0),
        "task": dict(k=8, eval_per_class=30),
        "adapt": dict(M=150, lr=4e-3),
    },
}


def profile_universe(name: str, seed: int | None = None) -> Universe:
    if name not in PROFILES:
        raise ArgumentError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    kw = dict(PROFILES[name]["universe"])
    if seed is not None:
        kw["seed"] = seed
    return make_universe(**kw)


def profile_task(name: str, universe: Universe, seed: int = 0, mode: str = "base-to-novel",
                 overlap: int = 0) -> FewShotTask:
    """Task over the shifted classes; ``overlap`` also pulls in that many pretraining classes."""
    spec = PROFILES[name]["task"]
    classes = universe.target_classes()
    if overlap:
        classes = universe.source_classes()[-overlap:] + classes
    return make_task(universe, classes, k=spec["k"], eval_per_class=spec["eval_per_class"],
                     seed=seed, mode=mode)


# -- persistence -------------------------------------------------------------------
def save_universe(path, universe: Universe, task: FewShotTask | None = None) -> None:
    header = {"format": "twostage-data", "version": DATA_FORMAT_VERSION,
              "universe": asdict(universe.config)}
    arrays = {"token_codes": universe.token_codes, "prototypes": universe.prototypes,
              "latents": universe.latents, "images": universe.images,
              "labels": universe.labels, "shifted": universe.shifted}
    if task is not None:
        header["task"] = {"base": list(task.base), "novel": list(task.novel),
                          "k": task.k, "seed": task.seed}
        arrays.update(shot_index=task.shot_index, eval_base_index=task.eval_base_index,
                      eval_novel_index=task.eval_novel_index)
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_universe(path) -> tuple[Universe, FewShotTask | None]:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["header"]).decode())
            arrays = {key: z[key] for key in z.files if key != "header"}
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read data file {path}: {exc}") from exc
    if header.get("format") != "twostage-data":
        raise FormatError("not a twostage data file")
    if header.get("version") != DATA_FORMAT_VERSION:
        raise VersionError(f"data format version {header.get('version')} unsupported")
    ucfg = dict(header["universe"])
    ucfg["grid"] = tuple(ucfg["grid"])
    universe = Universe(config=UniverseConfig(**ucfg), token_codes=arrays["token_codes"],
                        prototypes=arrays["prototypes"], latents=arrays["latents"],
                        images=arrays["images"], labels=arrays["labels"],
                        shifted=arrays["shifted"])
    task = None
    if "task" in header:
        t = header["task"]
        u = universe
        sb, eb, en = arrays["shot_index"], arrays["eval_base_index"], arrays["eval_novel_index"]
        task = FewShotTask(base=tuple(t["base"]), novel=tuple(t["novel"]), k=t["k"],
                           shot_index=sb, shot_images=u.images[sb], shot_labels=u.labels[sb],
                           eval_base_index=eb, eval_base_images=u.images[eb],
                           eval_base_labels=u.labels[eb],
                           eval_novel_index=en, eval_novel_images=u.images[en],
                           eval_novel_labels=u.labels[en], seed=t["seed"])
    return universe, task
