"""Model assembly: config validation, parameter grouping, endpoint encoding,
the triplet-batch pipeline, and blindness of masked slots to their content."""

import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import micro_config
from kgfusion.autodiff import ShapeError
from kgfusion.fusion import FusionConfig
from kgfusion.graph import IMAGE, TEXT, SampledEnd, TripletBatch, sample_batch, synth_pairs
from kgfusion.model import KgModel, ModelConfig
from kgfusion.trainer import parameter_digest


def test_config_requires_relation_classes():
    with pytest.raises(ShapeError, match="relation"):
        micro_config(n_relations=0).validate()


def test_config_fusion_slots_must_hold_encoder_maps():
    bad = FusionConfig(d_m=48, n_layers=1, n_heads=2, l_h=4, l_t=8)
    with pytest.raises(ShapeError, match="cannot hold"):
        micro_config(fusion=bad).validate()


def test_config_survives_json_roundtrip():
    cfg = micro_config(symmetric_e2e=True, temperature_init=0.2)
    again = ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_param_groups_partition_all_parameters(micro_model):
    groups = micro_model.param_groups()
    named = dict(micro_model.named_params())
    grouped = [n for g in groups.values() for n, _ in g]
    assert sorted(grouped) == sorted(named)
    assert all(n.startswith("encoders.") for n, _ in groups["encoders"])
    fusion_names = {n for n, _ in groups["fusion"]}
    assert "temp.log_tau" in fusion_names
    assert any(n.startswith("rel_head.") for n in fusion_names)
    assert any(n.startswith("gnn.") for n in fusion_names)


def test_clone_matches_then_decouples(micro_model):
    twin = micro_model.clone()
    assert parameter_digest(twin) == parameter_digest(micro_model)
    before = parameter_digest(micro_model)
    twin.temp.log_tau.data = twin.temp.log_tau.data + 1.0
    assert parameter_digest(micro_model) == before
    assert parameter_digest(twin) != before


# ---------------------------------------------------------------------------
# endpoint encoding


def text_end(s):
    return SampledEnd(entity_id=f"e:{s}", modality=TEXT, text=s)


def image_end(arr, name="img"):
    return SampledEnd(entity_id=f"e:{name}", modality=IMAGE, image=arr)


def test_encode_ends_preserves_order(micro_model, rng):
    imgs = [rng.random((16, 16, 3), dtype=np.float32) for _ in range(2)]
    ends = [text_end("a red cube"), image_end(imgs[0], "a"),
            text_end("a blue sphere"), image_end(imgs[1], "b")]
    fm = micro_model.encode_ends(ends)
    assert fm.modality == "mixed"
    assert fm.features.shape == (4, 8, 32)  # l_image=4 padded up to l_text

    txt = micro_model.encoders.encode_texts(["a red cube", "a blue sphere"])
    np.testing.assert_array_equal(fm.features.data[0], txt.features.data[0])
    np.testing.assert_array_equal(fm.features.data[2], txt.features.data[1])
    np.testing.assert_array_equal(fm.token_mask[0], txt.token_mask[0])

    img = micro_model.encoders.encode_images(imgs)
    np.testing.assert_array_equal(fm.features.data[1, :4], img.features.data[0])
    np.testing.assert_array_equal(fm.features.data[1, 4:], 0.0)
    np.testing.assert_array_equal(fm.token_mask[1], [1, 1, 1, 1, 0, 0, 0, 0])


def test_encode_ends_single_modality_tags(micro_model, rng):
    assert micro_model.encode_ends([text_end("only words")]).modality == TEXT
    img = rng.random((16, 16, 3), dtype=np.float32)
    assert micro_model.encode_ends([image_end(img)]).modality == IMAGE


# ---------------------------------------------------------------------------
# triplet batch pipeline


def test_batch_tensors_shapes(micro_model, small_graph):
    batch = sample_batch(small_graph, 6, seed=1)
    bt = micro_model.batch_tensors(batch, graph=small_graph)
    assert bt.anchor_y.shape == (6, 48)
    assert bt.tail_y.shape == (6, 48)
    assert bt.rel_r.shape == (6, 48)
    assert bt.labels.shape == (6,)
    assert all(0 <= l < 4 for l in bt.labels)
    assert len(bt.tail_ids) == len(set(bt.tail_ids)) == 6
    n_ent = len(bt.entity_ids)
    assert n_ent == len(set(bt.entity_ids))
    assert bt.entity_y.shape == (n_ent, 48)
    assert bt.propagated.shape == (n_ent, 48)
    batch_members = {it.head.entity_id for it in batch.items} | set(bt.tail_ids)
    assert set(bt.entity_ids) == batch_members


def test_batch_tensors_respects_flags(micro_model, small_graph):
    batch = sample_batch(small_graph, 4, seed=2)
    bt = micro_model.batch_tensors(batch, use_e2e=False, use_g2e=False, graph=small_graph)
    assert bt.anchor_y is None and bt.tail_y is None
    assert bt.entity_y is None and bt.propagated is None
    assert bt.rel_r is not None


def test_symmetric_variant_scores_heads_too(small_graph):
    model = KgModel(micro_config(symmetric_e2e=True))
    # the head-direction term needs pairwise-distinct heads; seed 0 gives them
    batch = sample_batch(small_graph, 4, seed=0)
    bt = model.batch_tensors(batch, use_e2r=False, use_g2e=False)
    assert bt.head_anchor_y.shape == (4, 48)
    assert bt.head_y.shape == (4, 48)
    assert bt.head_ids == [it.head.entity_id for it in batch.items]
    losses = model.kg_losses(batch, use_e2r=False, use_g2e=False)
    assert np.isfinite(losses["e2e"].item())


def test_propagation_edges_fall_back_to_batch(micro_model, small_graph):
    batch = sample_batch(small_graph, 6, seed=4)
    bt = micro_model.batch_tensors(batch, use_e2e=False, use_e2r=False, graph=None)
    # the batch's own edges always connect its endpoints, so propagation mixes
    assert not np.array_equal(bt.propagated.data, bt.entity_y.data)


def test_kg_losses_keys_follow_flags(micro_model, small_graph):
    batch = sample_batch(small_graph, 5, seed=5)
    losses = micro_model.kg_losses(batch, graph=small_graph)
    assert set(losses) == {"e2e", "e2r", "g2e"}
    assert all(np.isfinite(v.item()) and v.item() >= 0 for v in losses.values())
    only_rel = micro_model.kg_losses(batch, use_e2e=False, use_g2e=False)
    assert set(only_rel) == {"e2r"}


# ---------------------------------------------------------------------------
# masked slots never see their content


def scrambled_end(end: SampledEnd, rng) -> SampledEnd:
    if end.modality == TEXT:
        return replace(end, text="unrelated replacement words entirely")
    return replace(end, image=rng.random(end.image.shape, dtype=np.float32))


def test_anchor_output_blind_to_tail_content(micro_model, small_graph):
    rng = np.random.default_rng(12)
    batch = sample_batch(small_graph, 5, seed=6)
    swapped = TripletBatch(
        items=[replace(it, tail=scrambled_end(it.tail, rng)) for it in batch.items],
        seed=batch.seed)
    a = micro_model.batch_tensors(batch, use_e2r=False, use_g2e=False)
    b = micro_model.batch_tensors(swapped, use_e2r=False, use_g2e=False)
    assert np.array_equal(a.anchor_y.data, b.anchor_y.data)
    assert not np.array_equal(a.tail_y.data, b.tail_y.data)


def test_relation_slot_blind_to_relation_name(micro_model, small_graph):
    batch = sample_batch(small_graph, 5, seed=7)
    renamed = TripletBatch(
        items=[replace(it, relation_name="never seen phrase") for it in batch.items],
        seed=batch.seed)
    a = micro_model.batch_tensors(batch, use_e2e=False, use_g2e=False)
    b = micro_model.batch_tensors(renamed, use_e2e=False, use_g2e=False)
    assert np.array_equal(a.rel_r.data, b.rel_r.data)


# ---------------------------------------------------------------------------
# pooled pair pipeline


def test_pair_similarities_shape_and_bounds(micro_model):
    pairs = synth_pairs(5, seed=1, image_size=16)
    sims = micro_model.pair_similarities([p[0] for p in pairs], [p[1] for p in pairs])
    assert sims.shape == (5, 5)
    assert np.all(np.abs(sims.data) <= 1.0 + 1e-6)
    again = micro_model.pair_similarities([p[0] for p in pairs], [p[1] for p in pairs])
    np.testing.assert_array_equal(sims.data, again.data)


def test_pair_losses_teacher_adds_distillation(micro_model):
    pairs = synth_pairs(4, seed=2, image_size=16)
    images, caps = [p[0] for p in pairs], [p[1] for p in pairs]
    assert set(micro_model.pair_losses(images, caps)) == {"clip"}
    teacher = KgModel(micro_config(seed=8))
    losses = micro_model.pair_losses(images, caps, teacher=teacher)
    assert set(losses) == {"clip", "kd"}
    assert losses["kd"].item() >= 0
