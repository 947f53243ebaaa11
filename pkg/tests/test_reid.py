import struct

import numpy as np
import pytest
import torch

from camstyle_reid.benchmark import SOURCE_CAMERAS
from camstyle_reid.data import Dataset, DomainConfig, SyntheticSpec, generate_synthetic_domain
from camstyle_reid.errors import ConfigError, DataError, ValidationError
from camstyle_reid.gan import IdentityGenerator, translate_dataset
from camstyle_reid.reid import (
    EmbeddingSet,
    ReidModel,
    TrainHyperParams,
    extract_features,
    l2_normalize,
    lmp_pool,
    load_model,
    predict_logits,
    read_embeddings,
    save_model,
    train_baseline,
    training_accuracy,
    write_embeddings,
)


@pytest.fixture(scope="module")
def eight_ids():
    spec = SyntheticSpec(8, 6, SOURCE_CAMERAS, height=32, width=16)
    src = generate_synthetic_domain(spec, seed=4)
    cfg = DomainConfig((3, 3), 8)
    return translate_dataset(IdentityGenerator(), Dataset(src.records, cfg), cfg, seed=4)


def _tiny(**kw):
    return TrainHyperParams(**{"epochs": 20, "channels": 8, "parts": 4, "batch_size": 16, **kw})


# ---------------------------------------------------------------------------
# LMP
# ---------------------------------------------------------------------------

def test_lmp_full_scale_shape():
    out = lmp_pool(torch.randn(2048, 9, 5), 9)
    assert out.shape == (18_432,)


def test_lmp_full_scale_bands_are_rows():
    fm = torch.randn(2048, 9, 5)
    out = lmp_pool(fm, 9).reshape(9, 2048)
    assert torch.equal(out, fm.amax(dim=2).T)


def test_lmp_single_part_is_global_max(rng):
    fm = torch.from_numpy(rng.normal(size=(3, 16, 7, 5)))
    assert torch.equal(lmp_pool(fm, 1), fm.amax(dim=(2, 3)))


def test_lmp_constant_map():
    assert torch.all(lmp_pool(torch.full((4, 6, 3), 2.5), 3) == 2.5)


def test_lmp_remainder_rows_go_to_top_bands():
    # h=7, P=3: bands of 3, 2, 2 rows
    fm = torch.zeros(1, 7, 1)
    fm[0, 2, 0] = 1.0   # last row of band 0
    fm[0, 4, 0] = 2.0   # last row of band 1
    fm[0, 5, 0] = 3.0   # first row of band 2
    assert lmp_pool(fm, 3).tolist() == [1.0, 2.0, 3.0]


def test_lmp_band_major_order():
    fm = torch.zeros(2, 2, 1)
    fm[:, 0, 0] = torch.tensor([1.0, 2.0])
    fm[:, 1, 0] = torch.tensor([3.0, 4.0])
    assert lmp_pool(fm, 2).tolist() == [1.0, 2.0, 3.0, 4.0]


def test_lmp_monotone(rng):
    for _ in range(20):
        a = torch.from_numpy(rng.normal(size=(5, 9, 4)))
        b = a + torch.from_numpy(np.abs(rng.normal(size=a.shape)))
        assert torch.all(lmp_pool(b, 4) >= lmp_pool(a, 4))


def test_lmp_too_many_parts():
    with pytest.raises(ValidationError):
        lmp_pool(torch.zeros(3, 4, 2), 5)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def test_descriptor_dims():
    x = torch.zeros(2, 3, 32, 16)
    lmp = ReidModel(5, _tiny(parts=4))
    avg = ReidModel(5, _tiny(pooling="avg"))
    assert lmp.descriptor(x).shape == (2, 4 * lmp.backbone.out_channels)
    assert avg.descriptor(x).shape == (2, avg.backbone.out_channels)
    assert lmp.classifier.in_features == lmp.descriptor_dim


def test_bad_hyperparams():
    with pytest.raises(ConfigError):
        TrainHyperParams(pooling="gem")
    with pytest.raises(ConfigError):
        ReidModel(3, TrainHyperParams(backbone="vgg"))


def test_softmax_outputs_are_distributions(eight_ids):
    model = ReidModel(8, _tiny())
    probs = torch.softmax(torch.from_numpy(predict_logits(model, eight_ids)), 1)
    assert torch.all(probs >= 0)
    assert torch.allclose(probs.sum(1), torch.ones(len(probs)), atol=1e-6)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_training_fits_eight_identities(eight_ids):
    model = train_baseline(eight_ids, _tiny(), seed=0)
    assert training_accuracy(model, eight_ids) > 0.9
    assert len(model.train_log) == 20


def test_zero_epochs_returns_initialized_model(eight_ids):
    model = train_baseline(eight_ids, _tiny(epochs=0), seed=5)
    torch.manual_seed(5)
    fresh = ReidModel(8, _tiny())
    for a, b in zip(model.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(a, b)


def test_unlabeled_records_rejected(eight_ids):
    spec = SyntheticSpec(4, 2, SOURCE_CAMERAS, labeled=False)
    with pytest.raises(DataError):
        train_baseline(generate_synthetic_domain(spec, seed=0), _tiny(), seed=0)


def test_single_class_rejected():
    spec = SyntheticSpec(1, 4, SOURCE_CAMERAS)
    with pytest.raises(DataError):
        train_baseline(generate_synthetic_domain(spec, seed=0), _tiny(), seed=0)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def test_extract_normalized_rows(eight_ids):
    emb = extract_features(ReidModel(8, _tiny()), eight_ids)
    assert emb.normalized and emb.vectors.shape == (len(eight_ids), 4 * 32)
    assert np.allclose(np.linalg.norm(emb.vectors, axis=1), 1.0, atol=1e-6)
    assert emb.person_ids.tolist() == eight_ids.person_ids().tolist()


def test_extract_duplicate_inputs_give_identical_rows(eight_ids):
    rec = eight_ids.records[0]
    dup = Dataset((rec, rec), eight_ids.config, eight_ids.provenance)
    emb = extract_features(ReidModel(8, _tiny()), dup)
    assert np.array_equal(emb.vectors[0], emb.vectors[1])


def test_extract_is_repeatable(eight_ids):
    model = ReidModel(8, _tiny())
    a = extract_features(model, eight_ids, normalize=False)
    b = extract_features(model, eight_ids, normalize=False)
    assert a.vectors.tobytes() == b.vectors.tobytes() and not a.normalized


def test_extract_rejects_tiny_images():
    spec = SyntheticSpec(2, 2, SOURCE_CAMERAS, height=8, width=4)
    with pytest.raises(ValidationError):
        extract_features(ReidModel(2, _tiny(parts=4)), generate_synthetic_domain(spec, seed=0))


def test_l2_normalize(rng):
    emb = EmbeddingSet(rng.normal(size=(5, 3)), [0] * 5, [0] * 5, [0] * 5)
    out = l2_normalize(emb)
    assert out.normalized and np.allclose(np.linalg.norm(out.vectors, axis=1), 1, atol=1e-6)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_emb1_layout_and_roundtrip(tmp_path, rng):
    emb = EmbeddingSet(rng.normal(size=(3, 4)), [7, -1, 2], [0, 1, 2], [1, 1, 1], normalized=True)
    path = write_embeddings(emb, tmp_path / "x.emb")
    blob = path.read_bytes()
    assert blob[:4] == b"EMB1"
    assert struct.unpack_from("<III", blob, 4) == (3, 4, 1)
    assert blob[16 + 48:].decode() == "7,0,1\n-1,1,1\n2,2,1\n"
    back = read_embeddings(path)
    assert back.vectors.tobytes() == emb.vectors.tobytes()
    assert back.person_ids.tolist() == [7, -1, 2] and back.normalized
    write_embeddings(back, tmp_path / "y.emb")
    assert (tmp_path / "y.emb").read_bytes() == blob


def test_emb1_rejects_bad_files(tmp_path):
    (tmp_path / "bad.emb").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(DataError):
        read_embeddings(tmp_path / "bad.emb")
    (tmp_path / "short.emb").write_bytes(b"EMB1" + struct.pack("<III", 2, 2, 0) + bytes(4))
    with pytest.raises(DataError):
        read_embeddings(tmp_path / "short.emb")
    with pytest.raises(DataError):
        read_embeddings(tmp_path / "missing.emb")


def test_model_roundtrip(tmp_path, eight_ids):
    model = train_baseline(eight_ids, _tiny(epochs=1), seed=0)
    back = load_model(save_model(model, tmp_path / "m.pt"))
    assert back.hp == model.hp and back.num_classes == 8
    assert np.array_equal(predict_logits(model, eight_ids), predict_logits(back, eight_ids))


def test_resnet50_backbone_shape():
    pytest.importorskip("torchvision")
    model = ReidModel(10, TrainHyperParams(backbone="resnet50", parts=8)).eval()
    with torch.no_grad():
        fm = model.backbone(torch.zeros(1, 3, 256, 128))
        assert fm.shape == (1, 2048, 8, 4)
        assert model.descriptor(torch.zeros(1, 3, 256, 128)).shape == (1, 8 * 2048)
