"""Export features from a published vision encoder to a cgf file.

Supported encoders:
    clip-vit-l14       CLIP image encoder with projection head, 768-dim
    moco-v2-resnet18   ResNet-18 backbone (MoCo-v2 checkpoints), 512-dim

Images are resized to 224 along the smaller edge and center-cropped to
224 x 224 before encoding. Export runs in eval mode with no augmentation;
``--augment-average`` optionally averages the embeddings of two seeded
random augmentations per image instead.

cgf layout (little-endian):
    magic   4 bytes  b"CGF1"
    N       u32      number of points
    D       u32      feature dimension
    labels  u8       1 if an i32 label block follows the features
    data    f32      N * D features, row-major
    labels  i32      N labels (only if the flag is set)
"""

import argparse
import struct
import sys
from dataclasses import dataclass

import numpy as np
import torch
from torchvision import datasets, transforms

CGF_MAGIC = b"CGF1"

ENCODER_DIMS = {
    "clip-vit-l14": 768,
    "moco-v2-resnet18": 512,
}

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2023, 0.1994, 0.2010)


@dataclass
class ExportJob:
    dataset: str  # folder | cifar10
    root: str
    encoder: str
    out: str
    split: str = "train"
    batch_size: int = 64
    augment_average: bool = False
    augment_seed: int = 0
    pretrained: bool = True
    checkpoint: str | None = None
    limit: int | None = None

    def __post_init__(self):
        if self.dataset not in ("folder", "cifar10"):
            raise ValueError(f"unknown dataset kind {self.dataset!r}")
        if self.encoder not in ENCODER_DIMS:
            raise ValueError(
                f"unknown encoder {self.encoder!r}; choose from {sorted(ENCODER_DIMS)}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def build_preprocess(encoder: str, augment: bool = False):
    """Deterministic eval transform, or the seeded two-view recipe."""
    mean, std = (CLIP_MEAN, CLIP_STD) if encoder == "clip-vit-l14" \
        else (CIFAR_MEAN, CIFAR_STD)
    if augment:
        crop = 224 if encoder == "clip-vit-l14" else 32
        return transforms.Compose([
            transforms.RandomResizedCrop(crop, scale=(0.08, 1.0)),
            transforms.RandomHorizontalFlip(p=0.5),
            transforms.RandomApply([transforms.ColorJitter(0.4, 0.4, 0.4, 0.1)], p=0.8),
            transforms.RandomGrayscale(p=0.2),
            transforms.ToTensor(),
            transforms.Normalize(mean, std),
        ])
    return transforms.Compose([
        transforms.Resize(224),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize(mean, std),
    ])


class ClipEncoder(torch.nn.Module):
    """CLIP vision tower + projection; forward returns (B, 768)."""

    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, pixels):
        return self.model(pixel_values=pixels).image_embeds


class ResnetEncoder(torch.nn.Module):
    """ResNet-18 backbone with the classifier removed; forward returns (B, 512)."""

    def __init__(self, backbone):
        super().__init__()
        backbone.fc = torch.nn.Identity()
        self.backbone = backbone

    def forward(self, pixels):
        return self.backbone(pixels)


def build_encoder(name: str, pretrained: bool = True,
                  checkpoint: str | None = None) -> torch.nn.Module:
    if name == "clip-vit-l14":
        from transformers import CLIPVisionModelWithProjection
        if not pretrained:
            raise ValueError("clip-vit-l14 is only available pretrained")
        model = CLIPVisionModelWithProjection.from_pretrained(
            "openai/clip-vit-large-patch14")
        encoder = ClipEncoder(model)
    else:
        from torchvision.models import resnet18
        if pretrained and not checkpoint:
            raise ValueError(
                "moco-v2-resnet18 needs --checkpoint pointing to a published "
                "MoCo-v2 state dict")
        backbone = resnet18(weights=None)
        if checkpoint:
            state = torch.load(checkpoint, map_location="cpu", weights_only=True)
            state = state.get("state_dict", state)
            # MoCo checkpoints prefix the query encoder
            state = {k.removeprefix("module.encoder_q."): v for k, v in state.items()
                     if not k.startswith(("module.encoder_k.", "fc.", "module.encoder_q.fc."))}
            missing, unexpected = backbone.load_state_dict(state, strict=False)
            missing = [k for k in missing if not k.startswith("fc.")]
            if missing:
                raise ValueError(f"checkpoint is missing backbone weights: {missing[:5]}")
        encoder = ResnetEncoder(backbone)
    encoder.eval()
    return encoder


def build_dataset(job: ExportJob, preprocess):
    if job.dataset == "folder":
        return datasets.ImageFolder(job.root, transform=preprocess)
    return datasets.CIFAR10(job.root, train=job.split == "train",
                            transform=preprocess, download=False)


def write_cgf(path, features: np.ndarray, labels: np.ndarray):
    features = np.ascontiguousarray(features, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(CGF_MAGIC)
        fh.write(struct.pack("<IIB", features.shape[0], features.shape[1], 1))
        fh.write(features.tobytes())
        fh.write(labels.tobytes())


def export(job: ExportJob, encoder: torch.nn.Module | None = None) -> int:
    """Run the job; returns the number of exported points."""
    if encoder is None:
        encoder = build_encoder(job.encoder, pretrained=job.pretrained,
                                checkpoint=job.checkpoint)
    encoder.eval()
    expected_dim = ENCODER_DIMS[job.encoder]
    preprocess = build_preprocess(job.encoder, augment=job.augment_average)
    data = build_dataset(job, preprocess)

    n_total = len(data)
    if job.limit is not None:
        n_total = min(n_total, job.limit)
    if n_total == 0:
        raise ValueError(f"dataset at {job.root} is empty")

    if job.augment_average:
        torch.manual_seed(job.augment_seed)

    chunks, labels = [], []
    loader = torch.utils.data.DataLoader(
        torch.utils.data.Subset(data, range(n_total)),
        batch_size=job.batch_size, shuffle=False, num_workers=0)
    # a second pass over the same dataset object redraws the augmentations
    second = iter(torch.utils.data.DataLoader(
        torch.utils.data.Subset(data, range(n_total)),
        batch_size=job.batch_size, shuffle=False, num_workers=0)) \
        if job.augment_average else None

    with torch.no_grad():
        for pixels, batch_labels in loader:
            feats = encoder(pixels)
            if job.augment_average:
                pixels2, _ = next(second)
                feats = 0.5 * (feats + encoder(pixels2))
            if feats.ndim != 2 or feats.shape[1] != expected_dim:
                raise ValueError(
                    f"encoder produced shape {tuple(feats.shape)}, expected "
                    f"(batch, {expected_dim}); aborting before writing")
            chunks.append(feats.cpu().numpy().astype(np.float32))
            labels.append(np.asarray(batch_labels, dtype=np.int64))

    features = np.concatenate(chunks, axis=0)
    label_arr = np.concatenate(labels)
    if not np.isfinite(features).all():
        raise ValueError("encoder produced non-finite features; aborting before writing")
    write_cgf(job.out, features, label_arr)
    return features.shape[0]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cgf-export",
        description="Export vision encoder features to a cgf file")
    parser.add_argument("--dataset", choices=["folder", "cifar10"], required=True)
    parser.add_argument("--root", required=True, help="dataset root directory")
    parser.add_argument("--encoder", choices=sorted(ENCODER_DIMS), required=True)
    parser.add_argument("--split", choices=["train", "test"], default="train")
    parser.add_argument("--out", required=True)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--checkpoint", default=None,
                        help="optional encoder checkpoint (MoCo-v2 state dict)")
    parser.add_argument("--augment-average", action="store_true",
                        help="average the embeddings of two random augmentations")
    parser.add_argument("--augment-seed", type=int, default=0)
    parser.add_argument("--limit", type=int, default=None,
                        help="export at most this many images")
    args = parser.parse_args(argv)
    try:
        job = ExportJob(dataset=args.dataset, root=args.root, encoder=args.encoder,
                        out=args.out, split=args.split, batch_size=args.batch_size,
                        augment_average=args.augment_average,
                        augment_seed=args.augment_seed,
                        checkpoint=args.checkpoint, limit=args.limit)
        n = export(job)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {n} x {ENCODER_DIMS[args.encoder]} features to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
