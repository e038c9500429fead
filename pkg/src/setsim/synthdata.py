"""Seeded synthetic multi-aspect paired data.

Each image owns a few well-separated "aspect" prototypes; every caption of
that image covers a subset of them.  Local features are noisy prototype
rows, so one sample genuinely carries several semantic facets and ground
truth relevance is many-to-one (several captions per image).

Datasets round-trip through the SSF1 container bit-exactly; the same format
accepts externally computed feature dumps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fileio import read_container, write_container

DATA_MAGIC = b"SSF1"
DATA_VERSION = 1

MAX_PROTOTYPE_COSINE = 0.5


@dataclass
class WorldConfig:
    n_aspects: int = 8
    raw_dim: int = 32
    aspects_per_image: int = 4
    aspects_per_caption: int = 2
    captions_per_image: int = 5
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.aspects_per_image > self.n_aspects:
            raise ValueError(
                f"aspects_per_image ({self.aspects_per_image}) exceeds "
                f"n_aspects ({self.n_aspects})")
        if self.aspects_per_caption > self.aspects_per_image:
            raise ValueError(
                f"aspects_per_caption ({self.aspects_per_caption}) exceeds "
                f"aspects_per_image ({self.aspects_per_image})")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")

    def to_dict(self):
        return {"n_aspects": self.n_aspects, "raw_dim": self.raw_dim,
                "aspects_per_image": self.aspects_per_image,
                "aspects_per_caption": self.aspects_per_caption,
                "captions_per_image": self.captions_per_image,
                "noise_sigma": self.noise_sigma}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AspectWorld:
    config: WorldConfig
    seed: int
    prototypes: np.ndarray  # n_aspects x raw_dim unit rows, pairwise cos < 0.5


def make_world(config: WorldConfig, seed: int) -> AspectWorld:
    """Draw unit prototypes by rejection until pairwise cosines stay below 0.5."""
    rng = np.random.default_rng([seed, 0])
    rows = []
    attempts = 0
    while len(rows) < config.n_aspects:
        cand = rng.normal(size=config.raw_dim)
        cand /= np.linalg.norm(cand)
        if all(abs(float(cand @ r)) < MAX_PROTOTYPE_COSINE for r in rows):
            rows.append(cand)
        attempts += 1
        if attempts > 10_000 * config.n_aspects:
            raise RuntimeError("prototype rejection sampling did not converge; "
                               "raise raw_dim or lower n_aspects")
    return AspectWorld(config=config, seed=seed, prototypes=np.stack(rows))


@dataclass
class SyntheticDataset:
    world: AspectWorld
    data_seed: int
    image_aspects: np.ndarray    # n_images x aspects_per_image aspect ids
    image_locals: np.ndarray     # n_images x aspects_per_image x raw_dim
    caption_image: np.ndarray    # n_captions, owning image index
    caption_aspects: np.ndarray  # n_captions x aspects_per_caption aspect ids
    caption_locals: np.ndarray   # n_captions x aspects_per_caption x raw_dim

    @property
    def n_images(self):
        return len(self.image_aspects)

    @property
    def n_captions(self):
        return len(self.caption_image)

    @property
    def raw_dim(self):
        return self.world.config.raw_dim

    def image_to_captions(self):
        out = [[] for _ in range(self.n_images)]
        for cap, img in enumerate(self.caption_image):
            out[int(img)].append(cap)
        return out


def generate(world: AspectWorld, n_images: int, seed: int) -> SyntheticDataset:
    """Deterministic draw of images and captions from a fixed world."""
    cfg = world.config
    rng = np.random.default_rng([seed, 1])
    api, apc, cpi = cfg.aspects_per_image, cfg.aspects_per_caption, cfg.captions_per_image

    image_aspects = np.zeros((n_images, api), dtype=np.intp)
    image_locals = np.zeros((n_images, api, cfg.raw_dim))
    caption_image = np.zeros(n_images * cpi, dtype=np.intp)
    caption_aspects = np.zeros((n_images * cpi, apc), dtype=np.intp)
    caption_locals = np.zeros((n_images * cpi, apc, cfg.raw_dim))

    for i in range(n_images):
        aspects = rng.choice(cfg.n_aspects, size=api, replace=False)
        image_aspects[i] = aspects
        image_locals[i] = world.prototypes[aspects] \
            + cfg.noise_sigma * rng.normal(size=(api, cfg.raw_dim))
        for c in range(cpi):
            cap = i * cpi + c
            # captions re-observe their own image's rows (subset positions in
            # image order), so zero noise gives literal row-subsets and small
            # noise keeps ground truth identifiable
            pos = np.sort(rng.choice(api, size=apc, replace=False))
            caption_image[cap] = i
            caption_aspects[cap] = aspects[pos]
            caption_locals[cap] = image_locals[i][pos] \
                + cfg.noise_sigma * rng.normal(size=(apc, cfg.raw_dim))
    return SyntheticDataset(world=world, data_seed=seed,
                            image_aspects=image_aspects, image_locals=image_locals,
                            caption_image=caption_image, caption_aspects=caption_aspects,
                            caption_locals=caption_locals)


def save_features(path, dataset: SyntheticDataset):
    header = {
        "version": DATA_VERSION,
        "world": dataset.world.config.to_dict(),
        "world_seed": dataset.world.seed,
        "data_seed": dataset.data_seed,
        "n_images": dataset.n_images,
        "n_captions": dataset.n_captions,
        "image_aspects": dataset.image_aspects.tolist(),
        "caption_image": dataset.caption_image.tolist(),
        "caption_aspects": dataset.caption_aspects.tolist(),
    }
    payload = np.concatenate([
        dataset.world.prototypes.reshape(-1),
        dataset.image_locals.reshape(-1),
        dataset.caption_locals.reshape(-1),
    ])
    write_container(path, DATA_MAGIC, header, payload)


def load_features(path) -> SyntheticDataset:
    header, payload = read_container(path, DATA_MAGIC, DATA_VERSION)
    cfg = WorldConfig.from_dict(header["world"])
    n_img, n_cap = header["n_images"], header["n_captions"]
    api, apc, dr = cfg.aspects_per_image, cfg.aspects_per_caption, cfg.raw_dim

    sizes = [cfg.n_aspects * dr, n_img * api * dr, n_cap * apc * dr]
    protos, img_flat, cap_flat = np.split(payload, np.cumsum(sizes)[:-1])
    world = AspectWorld(config=cfg, seed=header["world_seed"],
                        prototypes=protos.reshape(cfg.n_aspects, dr))
    return SyntheticDataset(
        world=world, data_seed=header["data_seed"],
        image_aspects=np.asarray(header["image_aspects"], dtype=np.intp).reshape(n_img, api),
        image_locals=img_flat.reshape(n_img, api, dr),
        caption_image=np.asarray(header["caption_image"], dtype=np.intp).reshape(n_cap),
        caption_aspects=np.asarray(header["caption_aspects"],
                                   dtype=np.intp).reshape(n_cap, apc),
        caption_locals=cap_flat.reshape(n_cap, apc, dr))
