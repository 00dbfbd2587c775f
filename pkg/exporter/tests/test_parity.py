"""Facet parity: the exporter's score maps and keypoints must agree with an
independent recomputation by the retrieval engine's attention module, fed
only from the EFMT matrix dumps."""

import json

import numpy as np
import pytest

from vitexport.config import ExportConfig
from vitexport.export import export_matrices, list_images, load_image_tensor
from vitexport.model import load_backbone
from vitexport.scores import cls_score_map, select_keypoints

from conftest import IMAGE_SIZE, TOY_MODEL, TOY_MODEL_REGISTERS

from placerec.attention import ProjectionWeights, cls_attention_scores, project_facets
from placerec.attention import select_keypoints as primary_select
from placerec.store import read_matrix_file


def dump_and_load(cfg, image_path, out_dir):
    written = export_matrices(cfg, image_path, out_dir)
    mats = {
        name: read_matrix_file(written[name])
        for name in ("tokens", "w_q", "w_k", "w_v", "b_q", "b_k", "b_v")
    }
    meta = json.loads(written["meta"].read_text())
    return mats, meta


def strip_registers(tokens: np.ndarray, n_registers: int) -> np.ndarray:
    """CLS plus patch rows; register rows are not patches."""
    if n_registers == 0:
        return tokens
    return np.vstack([tokens[:1], tokens[1 + n_registers :]])


def recompute_with_primary(mats, meta):
    weights = ProjectionWeights(
        w_q=mats["w_q"], w_k=mats["w_k"], w_v=mats["w_v"],
        b_q=mats["b_q"][0], b_k=mats["b_k"][0], b_v=mats["b_v"][0],
        heads=meta["heads"],
    )
    tokens = strip_registers(mats["tokens"], meta["n_registers"])
    facets = project_facets(tokens, weights, layer_offset=meta["layer_offset"])
    scores = cls_attention_scores(facets)
    return facets, scores


@pytest.mark.parametrize("model", [TOY_MODEL, TOY_MODEL_REGISTERS])
def test_facet_parity_across_sampled_images(image_corpus, tmp_path, model):
    """Score maps and keypoint sets agree within 1e-4 on >= 10 images."""
    root, ids, _, _ = image_corpus
    cfg = ExportConfig(model=model, image_dir=str(root), image_size=IMAGE_SIZE)
    backbone = load_backbone(model)
    images = list_images(root)
    assert len(images) >= 10

    threshold = 1 / 16  # around the uniform level for a 4x4 grid
    for image_path in images:
        cap = backbone.capture(load_image_tensor(image_path, IMAGE_SIZE), cfg.layer_offset)
        exporter_scores = cls_score_map(cap)
        kp_scores, kp_descs = select_keypoints(cap, threshold)

        mats, meta = dump_and_load(cfg, image_path, tmp_path / image_path.stem)
        facets, primary_scores = recompute_with_primary(mats, meta)

        np.testing.assert_allclose(exporter_scores, primary_scores, atol=1e-4)

        primary_kps = primary_select(facets, primary_scores, threshold)
        assert len(primary_kps) == len(kp_scores)
        for mine_score, mine_desc, theirs in zip(kp_scores, kp_descs, primary_kps):
            assert mine_score == pytest.approx(theirs.score, abs=1e-4)
            np.testing.assert_allclose(mine_desc, theirs.descriptor, atol=1e-4)


def test_matrix_dims_match_model(image_corpus, tmp_path):
    root, _, _, _ = image_corpus
    cfg = ExportConfig(model=TOY_MODEL, image_dir=str(root), image_size=IMAGE_SIZE)
    image = list_images(root)[0]
    mats, meta = dump_and_load(cfg, image, tmp_path)
    p = (IMAGE_SIZE // 14) ** 2
    assert mats["tokens"].shape == (p + 1, 48)
    assert mats["w_q"].shape == mats["w_k"].shape == mats["w_v"].shape == (48, 48)
    assert mats["b_q"].shape == (1, 48)
    assert meta["heads"] == 4


def test_matrix_roundtrip_is_bit_exact(image_corpus, tmp_path):
    root, _, _, _ = image_corpus
    cfg = ExportConfig(model=TOY_MODEL, image_dir=str(root), image_size=IMAGE_SIZE)
    backbone = load_backbone(TOY_MODEL)
    image = list_images(root)[1]
    cap = backbone.capture(load_image_tensor(image, IMAGE_SIZE), 1)
    mats, _ = dump_and_load(cfg, image, tmp_path)
    assert mats["tokens"].tobytes() == cap.tokens.tobytes()
    assert mats["w_v"].tobytes() == cap.w_v.tobytes()


def test_cls_key_projection_consistency(image_corpus, tmp_path):
    """Row 0 of the dumped tokens is the CLS token: its projected key equals
    the key the exporter's score map used."""
    root, _, _, _ = image_corpus
    cfg = ExportConfig(model=TOY_MODEL, image_dir=str(root), image_size=IMAGE_SIZE)
    image = list_images(root)[2]
    mats, meta = dump_and_load(cfg, image, tmp_path)
    facets, _ = recompute_with_primary(mats, meta)

    k_cls = (
        mats["tokens"][0].astype(np.float64) @ mats["w_k"].astype(np.float64)
        + mats["b_k"][0].astype(np.float64)
    )
    np.testing.assert_allclose(facets.cls_key, k_cls, atol=1e-5)
