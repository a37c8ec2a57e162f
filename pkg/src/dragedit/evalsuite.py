"""Evaluation protocol: foreground similarity, object traces, KID, text-image
alignment, run over a JSON manifest of drag cases.

Embedders are pluggable by name. At desk scale the shipped embedders derive
from the toy backbone itself: crop features for the similarity metrics and a
fixed seeded projection against bag-of-token embeddings for the text-image
score (a documented stand-in for a real joint encoder).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import LatentState, ToyBackbone
from .errors import MaskError, ShapeMismatchError
from .images import load_image, load_mask
from .masks import as_binary_mask, bounding_box, translate_mask

MANIFEST_FORMAT_VERSION = 1


class Embedder(Protocol):
    name: str
    dim: int

    def embed(self, image: torch.Tensor) -> torch.Tensor: ...


def tight_crop(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Bounding-box crop of the mask support; raw pixel data, no resampling."""
    y0, y1, x0, x1 = bounding_box(mask)
    return image[..., y0:y1, x0:x1]


def _cosine(u: torch.Tensor, v: torch.Tensor) -> float:
    u, v = u.reshape(-1).double(), v.reshape(-1).double()
    nu, nv = float(torch.linalg.vector_norm(u)), float(torch.linalg.vector_norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float((u @ v) / (nu * nv))


class ToyFeatureEmbedder:
    """Crop embedder from the toy backbone: the crop is resized to the model
    resolution and the low-noise decoder features are average-pooled."""

    def __init__(self, backbone: ToyBackbone, t: int = 5):
        self.backbone = backbone
        self.t = t
        self.name = "toy"
        self.dim = backbone.config.widths[1]

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3:
            raise ShapeMismatchError(f"expected [C, H, W], got {tuple(image.shape)}")
        res = self.backbone.config.resolution
        x = image[None].float()
        if x.shape[-2:] != (res, res):
            x = F.interpolate(x, size=(res, res), mode="bilinear", align_corners=False)
        cond = self.backbone.null_condition()
        with torch.no_grad():
            feat = self.backbone.features(x[0], self.t, cond)
        return feat.mean(dim=(1, 2))


class ToyJointEmbedder:
    """Text-image stand-in: pooled backbone features through a fixed seeded
    projection vs the mean of the prompt's token embeddings."""

    def __init__(self, backbone: ToyBackbone, seed: int = 1234):
        self.backbone = backbone
        self.name = "toy-joint"
        self.dim = backbone.config.cond_dim
        gen = torch.Generator().manual_seed(seed)
        feat_dim = backbone.config.widths[1]
        self.projection = torch.randn((feat_dim, self.dim), generator=gen) / feat_dim ** 0.5
        self._image = ToyFeatureEmbedder(backbone)

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        return self._image.embed(image) @ self.projection

    def embed_text(self, prompt: str) -> torch.Tensor:
        cond = self.backbone.encode_prompt(prompt)
        return cond.token_embeddings.mean(dim=0)


def get_embedder(name: str, backbone: Optional[ToyBackbone] = None):
    """Embedder plug-in lookup; shipped: "toy" and "toy-joint"."""
    registry: Dict[str, Callable] = {
        "toy": lambda: ToyFeatureEmbedder(backbone),
        "toy-joint": lambda: ToyJointEmbedder(backbone),
    }
    if name not in registry:
        raise KeyError(f"unknown embedder {name!r}; available: {sorted(registry)}")
    if backbone is None:
        raise ValueError(f"embedder {name!r} needs a backbone")
    return registry[name]()


def foreground_similarity(orig: torch.Tensor, edited: torch.Tensor,
                          m_v: torch.Tensor, m_c: torch.Tensor,
                          embedder: Embedder) -> float:
    """Cosine between the edited target crop and the original object crop.

    Higher = the moved object better preserves the source object's features.
    """
    e_new = embedder.embed(tight_crop(edited, m_c))
    e_old = embedder.embed(tight_crop(orig, m_v))
    return _cosine(e_new, e_old)


def object_traces(orig: torch.Tensor, edited: torch.Tensor, m_v: torch.Tensor,
                  embedder: Embedder) -> float:
    """Cosine between the edited and original source-box crops.

    Lower = less of the object remains at its original position.
    """
    e_res = embedder.embed(tight_crop(edited, m_v))
    e_old = embedder.embed(tight_crop(orig, m_v))
    return _cosine(e_res, e_old)


def _poly_kernel(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kid(features_a: Sequence[torch.Tensor], features_b: Sequence[torch.Tensor],
        block_size: Optional[int] = None) -> float:
    """Unbiased squared MMD with the degree-3 polynomial kernel
    k(x, y) = (x^T y / d + 1)^3. Optional block averaging for large sets."""
    a = torch.stack([torch.as_tensor(v).reshape(-1).double() for v in features_a])
    b = torch.stack([torch.as_tensor(v).reshape(-1).double() for v in features_b])
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 vectors per set")
    if block_size is not None:
        vals = []
        for i in range(0, min(a.shape[0], b.shape[0]) - block_size + 1, block_size):
            vals.append(kid(a[i:i + block_size], b[i:i + block_size]))
        if not vals:
            return kid(a, b)
        return float(np.mean(vals))
    m, n = a.shape[0], b.shape[0]
    k_aa = _poly_kernel(a, a)
    k_bb = _poly_kernel(b, b)
    k_ab = _poly_kernel(a, b)
    sum_aa = (k_aa.sum() - k_aa.diagonal().sum()) / (m * (m - 1))
    sum_bb = (k_bb.sum() - k_bb.diagonal().sum()) / (n * (n - 1))
    return float(sum_aa + sum_bb - 2.0 * k_ab.mean())


def clip_score(image: torch.Tensor, prompt: str, joint_embedder) -> float:
    """Cosine between the joint embedder's image and text vectors."""
    return _cosine(joint_embedder.embed_image(image), joint_embedder.embed_text(prompt))


# -- manifest-driven benchmarking -------------------------------------------

@dataclass
class EvalCase:
    image_ref: str
    mask_ref: str
    offsets: List[Tuple[int, int]]
    prompt_source: str
    prompt_target: str

    def validate(self, resolution: int) -> None:
        mask = load_mask(self.mask_ref)
        for dx, dy in self.offsets:
            if translate_mask(mask, dx, dy).sum() == 0:
                raise MaskError(
                    f"offset ({dx}, {dy}) pushes the mask of {self.mask_ref} "
                    f"fully off canvas")


@dataclass
class EvalManifest:
    cases: List[EvalCase]
    real_set_refs: List[str] = field(default_factory=list)

    @classmethod
    def from_json(cls, obj: dict) -> "EvalManifest":
        if obj.get("version", MANIFEST_FORMAT_VERSION) != MANIFEST_FORMAT_VERSION:
            raise ValueError(f"unsupported manifest version {obj.get('version')}")
        cases = [EvalCase(image_ref=c["image_ref"], mask_ref=c["mask_ref"],
                          offsets=[tuple(o) for o in c["offsets"]],
                          prompt_source=c["prompt_source"],
                          prompt_target=c.get("prompt_target", c["prompt_source"]))
                 for c in obj.get("cases", [])]
        return cls(cases=cases, real_set_refs=list(obj.get("real_set_refs", [])))

    @classmethod
    def load(cls, path) -> "EvalManifest":
        with open(path) as f:
            return cls.from_json(json.load(f))


def run_benchmark(backbone: ToyBackbone, manifest: EvalManifest,
                  spec_overrides: Optional[dict] = None,
                  out_dir: Optional[Path] = None,
                  on_case: Optional[Callable[[str], None]] = None) -> dict:
    """Evaluate every (case, offset) pair and aggregate.

    Per-pair metrics: foreground similarity, object traces, text-image score.
    When the manifest names a real image set, KID is computed between whole
    edited images and that set. Returns the report dict; also writes
    report.csv and report.json when ``out_dir`` is given. Deterministic for a
    fixed manifest + overrides.
    """
    from .inversion import ddpm_invert
    from .pipeline import EditSpec, run_edit

    embedder = ToyFeatureEmbedder(backbone)
    joint = ToyJointEmbedder(backbone)
    rows: List[dict] = []
    edited_embeddings: List[torch.Tensor] = []

    for ci, case in enumerate(manifest.cases):
        case.validate(backbone.config.resolution)
        image = load_image(case.image_ref)
        m_v = load_mask(case.mask_ref)
        base = {"prompt_source": case.prompt_source,
                "prompt_target": case.prompt_target,
                "drag": {"dx": 0, "dy": 0}}
        if spec_overrides:
            base.update(json.loads(json.dumps(spec_overrides)))
        trajectory = None
        for dx, dy in case.offsets:
            obj = json.loads(json.dumps(base))
            obj["drag"]["dx"], obj["drag"]["dy"] = int(dx), int(dy)
            spec = EditSpec.from_json(obj)
            if trajectory is None:
                cond = backbone.encode_prompt(spec.prompt_source)
                trajectory = ddpm_invert(backbone, image, cond, seed=spec.seed,
                                         cfg_scale=spec.cfg_scale_1)
            result = run_edit(backbone, spec, image=image, m_v=m_v,
                              trajectory=trajectory)
            fg = foreground_similarity(image, result.branch1, m_v,
                                       result.masks.m_c, embedder)
            tr = object_traces(image, result.branch1, m_v, embedder)
            cs = clip_score(result.branch2, spec.prompt_target, joint)
            rows.append({"case": ci, "image_ref": case.image_ref,
                         "dx": int(dx), "dy": int(dy),
                         "foreground_similarity": fg, "object_traces": tr,
                         "text_image_score": cs})
            edited_embeddings.append(embedder.embed(result.branch1))
            if on_case is not None:
                on_case(f"case {ci} offset ({dx}, {dy}): fg={fg:.4f} tr={tr:.4f}")

    aggregate: dict = {"cases": len(manifest.cases), "pairs": len(rows)}
    if rows:
        for key in ("foreground_similarity", "object_traces", "text_image_score"):
            aggregate[f"mean_{key}"] = float(np.mean([r[key] for r in rows]))
    if manifest.real_set_refs and len(edited_embeddings) >= 2:
        real_embeddings = [embedder.embed(load_image(ref))
                           for ref in manifest.real_set_refs]
        if len(real_embeddings) >= 2:
            aggregate["kid"] = kid(edited_embeddings, real_embeddings)
    report = {"version": MANIFEST_FORMAT_VERSION, "rows": rows,
              "aggregate": aggregate}

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        fieldnames = ["case", "image_ref", "dx", "dy", "foreground_similarity",
                      "object_traces", "text_image_score"]
        with open(out_dir / "report.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
    return report
