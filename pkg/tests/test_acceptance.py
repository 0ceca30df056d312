"""End-to-end acceptance suite.

Each test covers one acceptance criterion and prints a single PASS/FAIL line
(run with `pytest tests/test_acceptance.py -v -s` to see them). The ablation
criterion trains on a 2000/400-scene dataset and dominates the runtime.
"""

import math
import statistics
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from sg3dvl.downstream import (ANSWER_SPACE, acc_at_kiou, bleu4, em_at_k,
                               m_at_kiou, rouge_l)
from sg3dvl.fusion import MultiHeadCrossAttention
from sg3dvl.geometry import Aabb, iou_aabb
from sg3dvl.masked_modality import (MaskPlan, mask_count, mask_words, mlm_loss,
                                    mom_loss)
from sg3dvl.model import FullModel
from sg3dvl.proposals import detection_loss
from sg3dvl.scene_graph import GraphLayer, SceneGraphState, graph_pool, knn_edges
from sg3dvl.scene_synth import (GeneratorConfig, generate_dataset, read_dataset,
                                write_dataset)
from sg3dvl.sg_mcl import info_nce, word_object_loss
from sg3dvl.trainer import (RunConfig, OBJECTIVE_ARMS, apply_overrides,
                            build_scene_cache, build_vocab, lang_to_object_loss,
                            load_checkpoint, run_pretrain, save_checkpoint,
                            ablate_depth, ablate_objectives)

from helpers import grad_check_both_precisions
from scenarios import ALL_SCENARIOS


def _verdict(number: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {number} [{name}]: {status}{suffix}")
    assert passed, f"acceptance criterion {number} ({name}) failed{suffix}"


# 1 -----------------------------------------------------------------------------

def test_acceptance_1_gradient_suite():
    start = time.monotonic()
    worst32 = worst64 = 0.0
    for build in ALL_SCENARIOS:
        err32, err64 = grad_check_both_precisions(
            build, eps=1e-6, max_entries=4, rng=np.random.default_rng(0))
        worst32 = max(worst32, err32)
        worst64 = max(worst64, err64)
    elapsed = time.monotonic() - start
    ok = worst32 < 1e-3 and worst64 < 1e-6 and elapsed < 120
    _verdict(1, "gradient suite", ok,
             f"fp32 max err {worst32:.2e}, fp64 max err {worst64:.2e}, {elapsed:.1f}s")


# 2 -----------------------------------------------------------------------------

def test_acceptance_2_closed_form_identities():
    checks = []
    for b in (2, 3, 5):
        loss = float(info_nce(torch.ones(b, 6), torch.ones(b, 6), tau=0.07))
        checks.append(abs(loss - math.log(b)) < 1e-6)
    # orthogonal supports force all word-object similarities to zero
    f_o = torch.zeros(1, 3, 8)
    f_w = torch.zeros(1, 4, 8)
    f_o[..., 0] = 1.0
    f_w[..., 5] = 1.0
    wo = float(word_object_loss(f_o, f_w, torch.randint(0, 2, (1, 3, 4)).float(),
                                torch.ones(1, 3, 4, dtype=torch.bool)))
    checks.append(abs(wo - math.log(2)) < 1e-6)
    # uniform-logit cross-entropies
    det = float(detection_loss(
        {"objectness_logits": torch.zeros(6, 2), "box_residuals": torch.zeros(6, 6),
         "semantic_logits": torch.zeros(6, 9)},
        torch.zeros(6, dtype=torch.long), torch.zeros(6, 6),
        torch.zeros(6, dtype=torch.long), torch.zeros(6, dtype=torch.bool)))
    checks.append(abs(det - math.log(2)) < 1e-6)
    plan = MaskPlan(masked_word_positions=[[0, 2]], masked_object_positions=[[1]])
    mlm = float(mlm_loss(torch.zeros(1, 4, 60), torch.zeros(1, 4, dtype=torch.long), plan))
    checks.append(abs(mlm - math.log(60)) < 1e-6)
    mom = float(mom_loss(torch.zeros(1, 4, 9), torch.zeros(1, 4, dtype=torch.long), plan))
    checks.append(abs(mom - math.log(9)) < 1e-6)
    classifier = torch.nn.Linear(8, 8)
    torch.nn.init.zeros_(classifier.weight)
    torch.nn.init.zeros_(classifier.bias)
    with torch.no_grad():
        lang = float(lang_to_object_loss(torch.randn(3, 8), classifier,
                                         torch.tensor([0, 3, 7])))
    checks.append(abs(lang - math.log(8)) < 1e-6)
    _verdict(2, "closed-form loss identities", all(checks),
             f"{sum(checks)}/{len(checks)} identities within 1e-6")


# 3 -----------------------------------------------------------------------------

def _graph_layer_oracle(layer, state):
    phi_n, edges, phi_e = state.node_feats, state.edge_index, state.edge_feats
    c = layer.feat_dim
    msgs = [[] for _ in range(phi_n.shape[0])]
    for e in range(edges.shape[0]):
        i, j = int(edges[e, 0]), int(edges[e, 1])
        parts = [phi_n[i], phi_e[e], phi_n[j]]
        if layer.mode == "edge_conv":
            parts.append(phi_n[j] - phi_n[i])
        out = layer.g1(torch.cat(parts))
        msgs[i].append(out[:c])
        msgs[j].append(out[2 * c:])
    return torch.stack([phi_n[i] + layer.g2(torch.stack(m).mean(dim=0))
                        for i, m in enumerate(msgs)])


def test_acceptance_3_oracle_equivalence():
    rng = np.random.default_rng(3)
    worst = 0.0

    torch.manual_seed(3)
    layers = {mode: GraphLayer(feat_dim=8, mode=mode).double()
              for mode in ("gcn", "edge_conv")}
    for trial in range(100):
        m = int(rng.integers(3, 9))
        centers = rng.uniform(-3, 3, (m, 3))
        edges = torch.tensor(knn_edges(centers, int(rng.integers(1, m))))
        state = SceneGraphState(
            torch.tensor(rng.standard_normal((m, 8))), edges,
            torch.tensor(rng.standard_normal((len(edges), 8))))
        layer = layers["gcn" if trial % 2 else "edge_conv"]
        with torch.no_grad():
            diff = (layer(state).node_feats - _graph_layer_oracle(layer, state)).abs().max()
        worst = max(worst, float(diff))

    for _ in range(100):
        b, m, l = 2, int(rng.integers(2, 6)), int(rng.integers(2, 6))
        f_o = torch.tensor(rng.standard_normal((b, m, 8)))
        f_w = torch.tensor(rng.standard_normal((b, l, 8)))
        targets = torch.tensor(rng.integers(0, 2, (b, m, l)), dtype=torch.float64)
        valid = torch.tensor(rng.integers(0, 2, (b, m, l)), dtype=torch.bool)
        valid[0, 0, 0] = True
        o = F.normalize(f_o, dim=-1)
        w = F.normalize(f_w, dim=-1)
        total = count = 0.0
        for i in range(b):
            for j in range(m):
                for k in range(l):
                    if valid[i, j, k]:
                        logit = float(o[i, j] @ w[i, k])
                        p = 1 / (1 + math.exp(-logit))
                        t = float(targets[i, j, k])
                        total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
                        count += 1
        diff = abs(float(word_object_loss(f_o, f_w, targets, valid)) - total / count)
        worst = max(worst, diff)

    for _ in range(100):
        m = int(rng.integers(3, 9))
        preds = {"objectness_logits": torch.tensor(rng.standard_normal((m, 2))),
                 "box_residuals": torch.tensor(rng.standard_normal((m, 6))),
                 "semantic_logits": torch.tensor(rng.standard_normal((m, 9)))}
        objectness = torch.tensor(rng.integers(0, 2, m))
        matched = objectness.bool()
        semantic = torch.tensor(rng.integers(0, 9, m))
        box_t = torch.tensor(rng.standard_normal((m, 6)))
        loss = float(detection_loss(preds, objectness, box_t, semantic, matched))
        l_obj = float(np.mean([float(F.cross_entropy(
            preds["objectness_logits"][i:i + 1], objectness[i:i + 1])) for i in range(m)]))
        idx = [i for i in range(m) if matched[i]]
        l_box = float(np.mean([float((preds["box_residuals"][i] - box_t[i]).abs().mean())
                               for i in idx])) if idx else 0.0
        l_sem = float(np.mean([float(F.cross_entropy(
            preds["semantic_logits"][i:i + 1], semantic[i:i + 1])) for i in idx])) if idx else 0.0
        worst = max(worst, abs(loss - (l_obj + l_box + l_sem)))

    for _ in range(100):
        b, m, v = 2, int(rng.integers(4, 9)), 9
        logits = torch.tensor(rng.standard_normal((b, m, v)))
        targets = torch.tensor(rng.integers(0, v, (b, m)))
        plan = MaskPlan(masked_object_positions=[
            sorted(rng.choice(m, mask_count(0.75, m), replace=False).tolist())
            for _ in range(b)])
        loop = float(np.mean([
            float(F.cross_entropy(logits[i, k].unsqueeze(0), targets[i, k].unsqueeze(0)))
            for i in range(b) for k in plan.masked_object_positions[i]]))
        worst = max(worst, abs(float(mom_loss(logits, targets, plan)) - loop))
        word_plan = MaskPlan(masked_word_positions=plan.masked_object_positions)
        loop_w = float(np.mean([
            float(F.cross_entropy(logits[i, k].unsqueeze(0), targets[i, k].unsqueeze(0)))
            for i in range(b) for k in word_plan.masked_word_positions[i]]))
        worst = max(worst, abs(float(mlm_loss(logits, targets, word_plan)) - loop_w))

    def rand_box():
        return Aabb(tuple(rng.uniform(-2, 2, 3)), tuple(rng.uniform(0.3, 2, 3)))

    words = ["a", "b", "c", "d", "e"]
    for _ in range(100):
        n = int(rng.integers(1, 8))
        pred_b = [rand_box() for _ in range(n)]
        gt_b = [rand_box() for _ in range(n)]
        k = float(rng.choice([0.25, 0.5]))
        acc_ref = sum(1 for p, g in zip(pred_b, gt_b) if iou_aabb(p, g) >= k) / n
        worst = max(worst, abs(acc_at_kiou(pred_b, gt_b, k) - acc_ref))
        ranked = [[ANSWER_SPACE[i] for i in rng.permutation(len(ANSWER_SPACE))]
                  for _ in range(n)]
        gts = [ANSWER_SPACE[int(rng.integers(len(ANSWER_SPACE)))] for _ in range(n)]
        topk = int(rng.choice([1, 10]))
        em_ref = sum(1 for r, g in zip(ranked, gts) if g in r[:topk]) / n
        worst = max(worst, abs(em_at_k(ranked, gts, topk) - em_ref))
        caps = [[words[i] for i in rng.integers(0, 5, 5)] for _ in range(n)]
        gt_caps = [[words[i] for i in rng.integers(0, 5, 5)] for _ in range(n)]
        for metric, fn in (("bleu4", bleu4), ("rougeL", rouge_l)):
            m_ref = sum(fn(c, g) if iou_aabb(p, q) >= k else 0.0
                        for c, g, p, q in zip(caps, gt_caps, pred_b, gt_b)) / n
            worst = max(worst, abs(m_at_kiou(caps, gt_caps, pred_b, gt_b, k, metric) - m_ref))

    _verdict(3, "oracle equivalence", worst < 1e-5, f"max abs diff {worst:.2e}")


# 4 -----------------------------------------------------------------------------

def test_acceptance_4_mask_only_supervision():
    ok = True
    rng = np.random.default_rng(4)
    for _ in range(20):
        b, l, v = 2, 8, 12
        plan = MaskPlan(
            masked_word_positions=[sorted(rng.choice(l, 2, replace=False).tolist())
                                   for _ in range(b)],
            masked_object_positions=[sorted(rng.choice(l, 3, replace=False).tolist())
                                     for _ in range(b)])
        logits = torch.tensor(rng.standard_normal((b, l, v)))
        targets = torch.tensor(rng.integers(0, v, (b, l)))
        for loss_fn, mask_rows in ((mlm_loss, plan.masked_word_positions),
                                   (mom_loss, plan.masked_object_positions)):
            base = float(loss_fn(logits, targets, plan))
            probe = logits.clone()
            for i in range(b):
                for k in range(l):
                    if k not in mask_rows[i]:
                        probe[i, k] += float(rng.uniform(0.5, 3.0))
            ok = ok and float(loss_fn(probe, targets, plan)) == base
            grad_in = logits.clone().requires_grad_(True)
            loss_fn(grad_in, targets, plan).backward()
            for i in range(b):
                for k in range(l):
                    if k not in mask_rows[i]:
                        ok = ok and bool(torch.all(grad_in.grad[i, k] == 0))
    for l in range(3, 65):
        ok = ok and mask_count(0.2, l) == max(1, math.floor(0.2 * l + 0.5))
    for m in range(8, 257):
        ok = ok and mask_count(0.75, m) == max(1, math.floor(0.75 * m + 0.5))
    ids = torch.randint(2, 30, (4, 20))
    lengths = torch.tensor([20, 10, 5, 3])
    _, plan = mask_words(ids, lengths, 1, np.random.default_rng(0))
    for row, l in zip(plan.masked_word_positions, lengths.tolist()):
        ok = ok and len(row) == max(1, math.floor(0.2 * l + 0.5))
    _verdict(4, "mask-only supervision and cardinalities", ok)


# 5 -----------------------------------------------------------------------------

def test_acceptance_5_structural_invariants():
    rng = np.random.default_rng(5)
    torch.manual_seed(5)
    ok = True
    layer = GraphLayer(feat_dim=8, mode="edge_conv").double()
    zeroed = GraphLayer(feat_dim=8, mode="gcn").double()
    torch.nn.init.zeros_(zeroed.g2[2].weight)
    torch.nn.init.zeros_(zeroed.g2[2].bias)
    attn = MultiHeadCrossAttention(8, 2).double()
    for _ in range(200):
        m = int(rng.integers(3, 9))
        centers = rng.uniform(-3, 3, (m, 3))
        edges = torch.tensor(knn_edges(centers, 2))
        node = torch.tensor(rng.standard_normal((m, 8)))
        edge = torch.tensor(rng.standard_normal((len(edges), 8)))
        state = SceneGraphState(node, edges, edge)
        perm = torch.tensor(rng.permutation(m))
        inv = torch.empty_like(perm)
        inv[perm] = torch.arange(m)
        with torch.no_grad():
            out = layer(state)
            out_p = layer(SceneGraphState(node[perm], inv[edges], edge))
            ok = ok and float((out.node_feats[perm] - out_p.node_feats).abs().max()) < 1e-6
            # pool invariance
            mask = torch.tensor(rng.integers(0, 2, m), dtype=torch.bool)
            if not mask.any():
                mask[0] = True
            pooled = graph_pool(node, mask)
            pooled_p = graph_pool(node[perm], mask[perm])
            ok = ok and float((pooled - pooled_p).abs().max()) < 1e-6
            # residual identity with zeroed update network
            fixed = zeroed(state)
            ok = ok and torch.equal(fixed.node_feats, node)
            # attention row-stochasticity
            attn(torch.tensor(rng.standard_normal((1, 3, 8))),
                 torch.tensor(rng.standard_normal((1, 5, 8))))
            rows = attn.last_attention.sum(dim=-1)
            ok = ok and float((rows - 1.0).abs().max()) < 1e-6
        a = Aabb(tuple(rng.uniform(-2, 2, 3)), tuple(rng.uniform(0.2, 2, 3)))
        b = Aabb(tuple(rng.uniform(-2, 2, 3)), tuple(rng.uniform(0.2, 2, 3)))
        ok = ok and abs(iou_aabb(a, b) - iou_aabb(b, a)) < 1e-12
        ok = ok and abs(iou_aabb(a, a) - 1.0) < 1e-12
    _verdict(5, "structural invariants", ok)


# 6 -----------------------------------------------------------------------------

ABLATION_OVERRIDES = {
    "n_scenes_train": "2000", "n_scenes_val": "400",
    "feat_dim": "80", "embed_dim": "64", "batch_size": "32",
    "utterances_per_scene": "2", "m_proposals": "10",
    "lr_finetune_rest": "1e-3", "lr_finetune_head": "1e-3",
    "pretrain_epochs": "3", "finetune_epochs": "5",
}


def test_acceptance_6_directional_ablation(tmp_path):
    start = time.monotonic()
    cfg = apply_overrides(RunConfig(), ABLATION_OVERRIDES)
    train = generate_dataset(0, cfg.n_scenes_train, cfg.generator_config())
    val = generate_dataset(999_331, cfg.n_scenes_val, cfg.generator_config())
    rows = ablate_objectives(train, val, cfg, tmp_path, seeds=(0, 1, 2))
    elapsed = time.monotonic() - start
    by_arm = {arm: [r["acc@0.5"] for r in rows if r["arm"] == arm] for arm in OBJECTIVE_ARMS}
    med_full = statistics.median(by_arm["sg_mcl_mmm"])
    med_scratch = statistics.median(by_arm["scratch"])
    detail = (f"median acc@0.5 scratch={med_scratch:.3f} full={med_full:.3f}, "
              f"{elapsed / 60:.1f} min")
    ok = med_full >= med_scratch and med_full >= 0.70 and elapsed < 45 * 60
    _verdict(6, "directional ablation", ok, detail)


# 7 -----------------------------------------------------------------------------

def test_acceptance_7_graph_depth_ablation(tmp_path):
    overrides = {
        "n_scenes_train": "60", "n_scenes_val": "20",
        "feat_dim": "32", "embed_dim": "16", "m_proposals": "10",
        "batch_size": "16", "pretrain_epochs": "1", "finetune_epochs": "1",
        "utterances_per_scene": "1",
    }
    cfg = apply_overrides(RunConfig(), overrides)
    train = generate_dataset(0, 60, cfg.generator_config())
    val = generate_dataset(7_777, 20, cfg.generator_config())
    rows = ablate_depth(train, val, cfg, tmp_path)
    table = tmp_path / "depth.csv"
    depths = sorted(r["n_graph_layers"] for r in rows)
    ok = depths == [1, 2, 3, 4] and table.exists() \
        and all("acc@0.5" in r for r in rows)
    _verdict(7, "graph-depth ablation", ok, f"depths {depths} in {table.name}")


# 8 -----------------------------------------------------------------------------

def test_acceptance_8_determinism_and_persistence(tmp_path):
    overrides = {
        "n_objects_min": "4", "n_objects_max": "6", "feat_dim": "16",
        "embed_dim": "8", "m_proposals": "8", "n1_neighbors": "4",
        "n_graph_layers": "2", "n_heads": "2", "batch_size": "4",
        "pretrain_epochs": "2", "utterances_per_scene": "1",
    }
    cfg = apply_overrides(RunConfig(), overrides)
    scenes = generate_dataset(cfg.seed, 8, cfg.generator_config())
    run_pretrain(scenes, cfg, tmp_path / "a")
    run_pretrain(scenes, cfg, tmp_path / "b")
    same_trace = (tmp_path / "a" / "pretrain_losses.csv").read_bytes() == \
        (tmp_path / "b" / "pretrain_losses.csv").read_bytes()

    vocab = build_vocab()
    torch.manual_seed(cfg.seed)
    model = FullModel(cfg.model_config(len(vocab)))
    cache = build_scene_cache(scenes, cfg)
    descriptors = torch.stack([c.descriptors for c in cache[:3]])
    with torch.no_grad():
        before = model.proposal_encoder(descriptors)
    save_checkpoint(tmp_path / "m.ckpt", model, cfg, epoch=0)
    torch.manual_seed(cfg.seed + 1)
    fresh = FullModel(cfg.model_config(len(vocab)))
    load_checkpoint(tmp_path / "m.ckpt", fresh)
    with torch.no_grad():
        after = fresh.proposal_encoder(descriptors)
    same_forward = torch.equal(before, after)

    data = generate_dataset(3, 40, GeneratorConfig())
    write_dataset(data, tmp_path / "d.jsonl")
    same_data = read_dataset(tmp_path / "d.jsonl") == data

    ok = same_trace and same_forward and same_data
    _verdict(8, "determinism and persistence", ok,
             f"trace={same_trace} checkpoint={same_forward} dataset={same_data}")
