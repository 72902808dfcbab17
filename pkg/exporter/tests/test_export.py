import numpy as np
import pytest
import torch
from PIL import Image
from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection

from cgfexport.export import (
    ClipEncoder,
    ExportJob,
    build_encoder,
    build_preprocess,
    export,
    main,
    write_cgf,
)
from ratecut.data import load_features


def tiny_clip_encoder(seed=0):
    # same interface and output width as the published model, desk-scale weights
    torch.manual_seed(seed)
    config = CLIPVisionConfig(hidden_size=32, intermediate_size=64,
                              num_hidden_layers=2, num_attention_heads=2,
                              image_size=224, patch_size=32, projection_dim=768)
    return ClipEncoder(CLIPVisionModelWithProjection(config)).eval()


@pytest.fixture(scope="module")
def image_folder(tmp_path_factory):
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    sizes = [(40, 56), (64, 48), (300, 200)]
    idx = 0
    for cls in ("cat", "dog", "owl"):
        (root / cls).mkdir()
        for _ in range(34 if cls != "owl" else 32):
            h, w = sizes[idx % len(sizes)]
            arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            Image.fromarray(arr).save(root / cls / f"img{idx:03d}.png")
            idx += 1
    return root


class TestPreprocess:
    def test_eval_transform_shapes(self):
        pre = build_preprocess("clip-vit-l14")
        for size in ((300, 500), (500, 300), (224, 224), (100, 900)):
            out = pre(Image.new("RGB", size, (128, 64, 32)))
            assert out.shape == (3, 224, 224)

    def test_eval_transform_deterministic(self):
        pre = build_preprocess("moco-v2-resnet18")
        img = Image.fromarray(
            np.random.default_rng(1).integers(0, 256, (60, 90, 3), dtype=np.uint8))
        assert torch.equal(pre(img), pre(img))

    def test_augment_crop_sizes(self):
        img = Image.new("RGB", (256, 256))
        assert build_preprocess("clip-vit-l14", augment=True)(img).shape == (3, 224, 224)
        assert build_preprocess("moco-v2-resnet18", augment=True)(img).shape == (3, 32, 32)


class TestJobValidation:
    def test_unknown_encoder(self):
        with pytest.raises(ValueError, match="encoder"):
            ExportJob(dataset="folder", root=".", encoder="dino", out="x.cgf")

    def test_unknown_dataset(self):
        with pytest.raises(ValueError, match="dataset"):
            ExportJob(dataset="imagenet", root=".", encoder="clip-vit-l14", out="x.cgf")

    def test_bad_split(self):
        with pytest.raises(ValueError, match="split"):
            ExportJob(dataset="folder", root=".", encoder="clip-vit-l14",
                      out="x.cgf", split="val")


class TestWriteCgf:
    def test_exact_byte_layout(self, tmp_path):
        feats = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        labels = np.array([0, 1], dtype=np.int32)
        path = tmp_path / "x.cgf"
        write_cgf(path, feats, labels)
        import struct
        expected = (b"CGF1" + struct.pack("<IIB", 2, 2, 1)
                    + feats.astype("<f4").tobytes() + labels.astype("<i4").tobytes())
        assert path.read_bytes() == expected


class TestExport:
    def test_hundred_image_sample(self, image_folder, tmp_path):
        """Exported sample loads through the consumer's reader with the right
        shape, labels, and no NaN entries; re-export is byte-identical."""
        encoder = tiny_clip_encoder()
        out = tmp_path / "sample.cgf"
        job = ExportJob(dataset="folder", root=str(image_folder),
                        encoder="clip-vit-l14", out=str(out), batch_size=16)
        n = export(job, encoder=encoder)
        assert n == 100
        fm = load_features(out)
        assert fm.n_points == 100 and fm.dim == 768
        assert fm.labels is not None and sorted(np.unique(fm.labels)) == [0, 1, 2]
        assert np.isfinite(fm.features).all()

        out2 = tmp_path / "sample2.cgf"
        export(ExportJob(dataset="folder", root=str(image_folder),
                         encoder="clip-vit-l14", out=str(out2), batch_size=16),
               encoder=encoder)
        assert out.read_bytes() == out2.read_bytes()
        print("\nPASS exporter sample: 100 x 768 with labels, no NaNs, "
              "re-export byte-identical")

    def test_resnet_exports_512(self, image_folder, tmp_path):
        encoder = build_encoder("moco-v2-resnet18", pretrained=False)
        out = tmp_path / "resnet.cgf"
        job = ExportJob(dataset="folder", root=str(image_folder),
                        encoder="moco-v2-resnet18", out=str(out),
                        batch_size=32, limit=20)
        assert export(job, encoder=encoder) == 20
        fm = load_features(out)
        assert fm.dim == 512 and fm.n_points == 20

    def test_limit_caps_export(self, image_folder, tmp_path):
        out = tmp_path / "few.cgf"
        job = ExportJob(dataset="folder", root=str(image_folder),
                        encoder="clip-vit-l14", out=str(out), limit=7)
        assert export(job, encoder=tiny_clip_encoder()) == 7
        assert load_features(out).n_points == 7

    def test_dimension_mismatch_aborts_before_writing(self, image_folder, tmp_path):
        class WrongDim(torch.nn.Module):
            def forward(self, pixels):
                return torch.zeros(pixels.shape[0], 99)

        out = tmp_path / "bad.cgf"
        job = ExportJob(dataset="folder", root=str(image_folder),
                        encoder="clip-vit-l14", out=str(out), limit=8)
        with pytest.raises(ValueError, match="expected"):
            export(job, encoder=WrongDim())
        assert not out.exists()

    def test_augment_average_seeded(self, image_folder, tmp_path):
        encoder = build_encoder("moco-v2-resnet18", pretrained=False)
        outs = []
        for run, seed in enumerate((5, 5, 6)):
            out = tmp_path / f"aug{run}.cgf"
            job = ExportJob(dataset="folder", root=str(image_folder),
                            encoder="moco-v2-resnet18", out=str(out),
                            limit=12, augment_average=True, augment_seed=seed)
            export(job, encoder=encoder)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        assert outs[0] != outs[2]

    def test_missing_root_fails(self, tmp_path):
        job = ExportJob(dataset="folder", root=str(tmp_path / "nope"),
                        encoder="clip-vit-l14", out=str(tmp_path / "x.cgf"))
        with pytest.raises(FileNotFoundError):
            export(job, encoder=tiny_clip_encoder())


class TestCheckpointLoading:
    def test_moco_prefixes_stripped(self, tmp_path):
        from torchvision.models import resnet18
        torch.manual_seed(3)
        source = resnet18(weights=None)
        state = {f"module.encoder_q.{k}": v for k, v in source.state_dict().items()}
        state["module.encoder_k.conv1.weight"] = torch.zeros_like(
            source.state_dict()["conv1.weight"])
        ckpt = tmp_path / "moco.pt"
        torch.save({"state_dict": state}, ckpt)
        encoder = build_encoder("moco-v2-resnet18", checkpoint=str(ckpt))
        loaded = encoder.backbone.state_dict()
        for key, value in source.state_dict().items():
            if key.startswith("fc."):
                continue
            assert torch.equal(loaded[key], value)

    def test_incomplete_checkpoint_rejected(self, tmp_path):
        ckpt = tmp_path / "partial.pt"
        torch.save({"state_dict": {"module.encoder_q.conv1.weight":
                                   torch.zeros(64, 3, 7, 7)}}, ckpt)
        with pytest.raises(ValueError, match="missing backbone weights"):
            build_encoder("moco-v2-resnet18", checkpoint=str(ckpt))


class TestCli:
    def test_usage_error_exit_code(self, tmp_path, capsys):
        code = main(["--dataset", "folder", "--root", str(tmp_path / "nope"),
                     "--encoder", "moco-v2-resnet18",
                     "--out", str(tmp_path / "x.cgf"), "--batch-size", "0"])
        assert code == 1
        assert "export failed" in capsys.readouterr().err

    def test_moco_without_checkpoint_rejected(self, tmp_path, capsys):
        code = main(["--dataset", "folder", "--root", str(tmp_path),
                     "--encoder", "moco-v2-resnet18",
                     "--out", str(tmp_path / "x.cgf")])
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err
