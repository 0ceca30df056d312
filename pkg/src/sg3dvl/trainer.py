"""Pre-training and fine-tuning loops, loss composition, checkpoints, ablations."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .downstream import (ANSWER_SPACE, acc_at_kiou, answer_id, build_grounding_target,
                         caption_loss, em_at_k, grounding_loss, m_at_kiou,
                         qa_answer_loss)
from .geometry import iou_aabb
from .masked_modality import (box_position_batch, mask_object_positions,
                              mask_words, mlm_loss, mom_loss)
from .model import FullModel, ModelConfig
from .proposals import JitterConfig, ProposalSet, detection_loss, propose
from .scene_graph import edge_geometry, knn_edges
from .scene_synth import (CATEGORIES, GeneratorConfig, SyntheticScene,
                          vocabulary_words)
from .sg_mcl import build_word_object_targets, info_nce, word_object_loss
from .text_encoder import Vocabulary, pad_batch, tokenize

TASKS = ("ground", "caption", "qa")


@dataclass
class RunConfig:
    seed: int = 0
    # generator
    n_scenes_train: int = 200
    n_scenes_val: int = 50
    n_objects_min: int = 4
    n_objects_max: int = 8
    utterances_per_scene: int = 2
    qa_per_scene: int = 2
    size_min: float = 0.5
    size_max: float = 1.2
    # proposals
    m_proposals: int = 12
    jitter_center_m: float = 0.05
    jitter_size_frac: float = 0.05
    # model
    feat_dim: int = 256
    embed_dim: int = 300
    n1_neighbors: int = 8
    n_graph_layers: int = 3
    graph_layer_mode: str = "edge_conv"
    n_fusion_layers: int = 2
    n_heads: int = 4
    tau: float = 0.07
    soft_wo_targets: bool = False
    word_mask_ratio: float = 0.2
    object_mask_ratio: float = 0.75
    # training
    batch_size: int = 16
    pretrain_epochs: int = 3
    finetune_epochs: int = 5
    lr_text: float = 5e-4
    lr_proposal: float = 2e-3
    lr_finetune_head: float = 5e-4
    lr_finetune_rest: float = 1e-4
    weight_decay: float = 1e-2
    grad_clip: float = 5.0
    weight_a: float = 1.0
    weight_b: float = 1.0
    weight_c: float = 1.0
    weight_d: float = 1.0
    qa_lr_decay_epoch: int = 15
    qa_lr_decay_factor: float = 0.2

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            n_objects_min=self.n_objects_min, n_objects_max=self.n_objects_max,
            size_min=self.size_min, size_max=self.size_max,
            utterances_per_scene=self.utterances_per_scene,
            qa_per_scene=self.qa_per_scene,
        )

    def jitter_config(self) -> JitterConfig:
        return JitterConfig(self.jitter_center_m, self.jitter_size_frac)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, feat_dim=self.feat_dim, embed_dim=self.embed_dim,
            m_proposals=self.m_proposals, n1_neighbors=self.n1_neighbors,
            n_graph_layers=self.n_graph_layers, graph_layer_mode=self.graph_layer_mode,
            n_fusion_layers=self.n_fusion_layers, n_heads=self.n_heads, tau=self.tau,
            soft_wo_targets=self.soft_wo_targets,
            word_mask_ratio=self.word_mask_ratio,
            object_mask_ratio=self.object_mask_ratio,
        )


def load_config(path) -> RunConfig:
    """Parse a 'key = value' text file into a RunConfig."""
    text = Path(path).read_text()
    overrides: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        overrides[key] = value
    return apply_overrides(RunConfig(), overrides)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    valid = {f.name: f.type for f in fields(RunConfig)}
    values = asdict(cfg)
    for key, raw in overrides.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        current = values[key]
        if isinstance(current, bool):
            values[key] = raw.strip().lower() in ("1", "true", "yes") if isinstance(raw, str) else bool(raw)
        elif isinstance(current, int):
            values[key] = int(raw)
        elif isinstance(current, float):
            values[key] = float(raw)
        else:
            values[key] = str(raw)
    return RunConfig(**values)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LossWeights:
    a: float = 1.0  # SG_MCL
    b: float = 1.0  # MMM
    c: float = 1.0  # DET
    d: float = 1.0  # lang

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.a, self.b, self.c, self.d) <= 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossReport:
    l_wo: float
    l_sro: float
    l_scene: float
    l_sg_mcl: float
    l_mlm: float
    l_mom: float
    l_mmm: float
    l_det: float
    l_lang: float
    l_pre: float

    FIELDS = ("l_wo", "l_sro", "l_scene", "l_sg_mcl", "l_mlm", "l_mom",
              "l_mmm", "l_det", "l_lang", "l_pre")


def lang_to_object_loss(f_s: torch.Tensor, classifier, target_category: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of a linear classifier on sentence features vs referred category."""
    logits = classifier(f_s).clamp(-30.0, 30.0)
    return F.cross_entropy(logits, target_category)


def build_vocab() -> Vocabulary:
    return Vocabulary(vocabulary_words())


# scene cache ----------------------------------------------------------------

@dataclass
class SceneCache:
    """Per-scene model-side tensors, deterministic given (seed, scene index)."""
    scene: SyntheticScene
    pset: ProposalSet
    descriptors: torch.Tensor        # (M, 31)
    position_attrs: torch.Tensor     # (M, 27)
    edges: np.ndarray                # (E, 2)
    edge_geo: torch.Tensor           # (E, 8)
    objectness: torch.Tensor         # (M,) long
    semantic: torch.Tensor           # (M,) long
    box_residuals: torch.Tensor      # (M, 6)
    matched: torch.Tensor            # (M,) bool
    best_proposal: dict[int, int] = field(default_factory=dict)  # gt id -> proposal idx


def build_scene_cache(scenes, cfg: RunConfig) -> list[SceneCache]:
    jitter = cfg.jitter_config()
    gen_cfg = cfg.generator_config()
    out = []
    for idx, scene in enumerate(scenes):
        rng = np.random.default_rng([cfg.seed, 77, idx])
        pset = propose(scene, cfg.m_proposals, jitter, rng, gen_cfg)
        boxes = [p.box for p in pset.proposals]
        centers = np.stack([np.asarray(b.center) for b in boxes])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            edges = knn_edges(centers, min(cfg.n1_neighbors, len(boxes) - 1))
        best = {}
        for obj in scene.objects:
            ious = [iou_aabb(p.box, obj.box) for p in pset.proposals]
            best[obj.id] = int(np.argmax(ious))
        out.append(SceneCache(
            scene=scene, pset=pset,
            descriptors=pset.descriptors(),
            position_attrs=box_position_batch([boxes])[0],
            edges=edges, edge_geo=edge_geometry(boxes, edges),
            objectness=pset.objectness_targets(),
            semantic=pset.semantic_targets(),
            box_residuals=pset.box_residual_targets(scene),
            matched=pset.matched_mask(),
            best_proposal=best,
        ))
    return out


def _stack_graph(caches: list[SceneCache], m: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Flat edge index over disjoint per-scene graphs plus concatenated geometry."""
    parts, geos = [], []
    for b, cache in enumerate(caches):
        parts.append(torch.tensor(cache.edges + b * m))
        geos.append(cache.edge_geo)
    return torch.cat(parts), torch.cat(geos)


def _word_valid(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len)[None, :] < lengths[:, None]


# batch assembly --------------------------------------------------------------

def utterance_samples(cache: list[SceneCache]) -> list[tuple[int, int]]:
    """(scene index, utterance index) pairs with a usable grounding target."""
    out = []
    for si, entry in enumerate(cache):
        for ui, utt in enumerate(entry.scene.utterances):
            box = next(o.box for o in entry.scene.objects if o.id == utt.referred_id)
            if any(iou_aabb(p.box, box) > 0.25 for p in entry.pset.proposals):
                out.append((si, ui))
    return out


def qa_samples(cache: list[SceneCache]) -> list[tuple[int, int]]:
    return [(si, qi) for si, entry in enumerate(cache)
            for qi in range(len(entry.scene.qa_pairs))]


class BatchBuilder:
    """Turns (scene, utterance/qa) index pairs into padded tensors."""

    def __init__(self, cache: list[SceneCache], vocab: Vocabulary, cfg: RunConfig):
        self.cache = cache
        self.vocab = vocab
        self.cfg = cfg

    def _scene_tensors(self, scene_idx: list[int]) -> dict:
        caches = [self.cache[i] for i in scene_idx]
        edges, geo = _stack_graph(caches, self.cfg.m_proposals)
        return {
            "caches": caches,
            "descriptors": torch.stack([c.descriptors for c in caches]),
            "position_attrs": torch.stack([c.position_attrs for c in caches]),
            "edge_index": edges,
            "edge_geo": geo,
            "objectness": torch.stack([c.objectness for c in caches]),
            "semantic": torch.stack([c.semantic for c in caches]),
            "box_residuals": torch.stack([c.box_residuals for c in caches]),
            "matched": torch.stack([c.matched for c in caches]),
        }

    def utterance_batch(self, pairs: list[tuple[int, int]]) -> dict:
        scene_idx = [p[0] for p in pairs]
        batch = self._scene_tensors(scene_idx)
        utts = [self.cache[si].scene.utterances[ui] for si, ui in pairs]
        token_ids, lengths = pad_batch(
            [tokenize(u.tokens, self.vocab) for u in utts], self.vocab.pad_id)
        batch.update(token_ids=token_ids, lengths=lengths,
                     name_spans=[u.name_spans for u in utts])
        ref_idx, ref_cat, ref_boxes, targets = [], [], [], []
        for (si, _ui), utt in zip(pairs, utts):
            entry = self.cache[si]
            obj = next(o for o in entry.scene.objects if o.id == utt.referred_id)
            ref_idx.append(entry.best_proposal[utt.referred_id])
            ref_cat.append(CATEGORIES.index(obj.category))
            ref_boxes.append(obj.box)
            targets.append(build_grounding_target(entry.pset, obj.box))
        batch.update(
            referred_prop_idx=torch.tensor(ref_idx, dtype=torch.long),
            referred_category=torch.tensor(ref_cat, dtype=torch.long),
            referred_boxes=ref_boxes,
            grounding_targets=torch.stack(targets),
        )
        desc_ids, desc_lengths = pad_batch(
            [tokenize(self.cache[si].scene.scene_description, self.vocab)
             for si in scene_idx], self.vocab.pad_id)
        batch.update(desc_ids=desc_ids, desc_lengths=desc_lengths)
        cap_ids, cap_lengths = pad_batch(
            [tokenize(("bos",) + u.tokens + ("eos",), self.vocab) for u in utts],
            self.vocab.pad_id)
        batch.update(caption_ids=cap_ids, caption_lengths=cap_lengths)
        return batch

    def qa_batch(self, pairs: list[tuple[int, int]]) -> dict:
        scene_idx = [p[0] for p in pairs]
        batch = self._scene_tensors(scene_idx)
        qas = [self.cache[si].scene.qa_pairs[qi] for si, qi in pairs]
        token_ids, lengths = pad_batch(
            [tokenize(q.question, self.vocab) for q in qas], self.vocab.pad_id)
        rel_idx = [self.cache[si].best_proposal[q.relevant_id]
                   for (si, _qi), q in zip(pairs, qas)]
        batch.update(
            token_ids=token_ids, lengths=lengths,
            answer_ids=torch.tensor([answer_id(q.answer) for q in qas], dtype=torch.long),
            answers=[q.answer for q in qas],
            relevant_prop_idx=torch.tensor(rel_idx, dtype=torch.long),
        )
        return batch


# pre-training ----------------------------------------------------------------

def compute_pretrain_losses(model: FullModel, batch: dict, cfg: RunConfig,
                            rng: np.random.Generator) -> dict[str, torch.Tensor]:
    f_o = model.proposal_encoder(batch["descriptors"])
    b, m, _ = f_o.shape

    preds = model.detection_heads(f_o)
    flat_preds = {k: v.reshape(b * m, -1) for k, v in preds.items()}
    l_det = detection_loss(
        flat_preds,
        batch["objectness"].reshape(-1),
        batch["box_residuals"].reshape(b * m, -1),
        batch["semantic"].reshape(-1),
        batch["matched"].reshape(-1),
    )

    f_w, f_s = model.text_encoder(batch["token_ids"], batch["lengths"])
    targets, valid = build_word_object_targets(
        batch["name_spans"], batch["token_ids"].shape[1],
        [c.pset for c in batch["caches"]], cfg.soft_wo_targets)
    l_wo = word_object_loss(f_o, f_w, targets.to(f_o.dtype), valid)

    node = model.run_graph(f_o, batch["edge_index"], batch["edge_geo"])
    ref_node = node[torch.arange(b), batch["referred_prop_idx"]]
    l_sro = info_nce(ref_node, f_s, cfg.tau)

    mask = batch["objectness"].to(f_o.dtype)
    counts = mask.sum(dim=1, keepdim=True)
    mask = torch.where(counts > 0, mask, torch.ones_like(mask))
    f_sc = (node * mask.unsqueeze(-1)).sum(dim=1) / mask.sum(dim=1, keepdim=True)
    _, f_des = model.text_encoder(batch["desc_ids"], batch["desc_lengths"])
    l_scene = info_nce(f_sc, f_des, cfg.tau)

    unk_id = build_vocab().unk_id
    masked_ids, plan = mask_words(batch["token_ids"], batch["lengths"],
                                  unk_id, rng, cfg.word_mask_ratio)
    f_w_mask, _ = model.text_encoder(masked_ids, batch["lengths"])
    mlm_logits = model.mlm_head(f_w_mask, f_o)
    l_mlm = mlm_loss(mlm_logits, batch["token_ids"], plan)

    plan.masked_object_positions = [
        mask_object_positions(m, rng, cfg.object_mask_ratio) for _ in range(b)]
    object_mask = plan.object_mask_bool(b, m)
    word_valid = _word_valid(batch["lengths"], batch["token_ids"].shape[1])
    mom_logits = model.mom_head(f_o, object_mask, batch["position_attrs"].to(f_o.dtype),
                                f_w, word_valid)
    l_mom = mom_loss(mom_logits, batch["semantic"], plan)

    l_lang = lang_to_object_loss(f_s, model.lang_classifier, batch["referred_category"])

    return {"l_wo": l_wo, "l_sro": l_sro, "l_scene": l_scene,
            "l_mlm": l_mlm, "l_mom": l_mom, "l_det": l_det, "l_lang": l_lang}


def compose_total(terms: dict[str, torch.Tensor], weights: LossWeights) -> tuple[torch.Tensor, LossReport]:
    l_sg_mcl = terms["l_wo"] + terms["l_sro"] + terms["l_scene"]
    l_mmm = terms["l_mlm"] + terms["l_mom"]
    l_pre = (weights.a * l_sg_mcl + weights.b * l_mmm
             + weights.c * terms["l_det"] + weights.d * terms["l_lang"])
    named = dict(terms, l_sg_mcl=l_sg_mcl, l_mmm=l_mmm, l_pre=l_pre)
    for name, value in named.items():
        if not torch.isfinite(value):
            raise RuntimeError(f"non-finite loss term {name}")
    report = LossReport(**{k: float(v.detach()) for k, v in named.items()})
    return l_pre, report


def make_pretrain_optimizer(model: FullModel, cfg: RunConfig) -> torch.optim.AdamW:
    proposal_params = list(model.proposal_encoder.parameters()) \
        + list(model.detection_heads.parameters())
    proposal_ids = {id(p) for p in proposal_params}
    rest = [p for p in model.parameters() if id(p) not in proposal_ids]
    return torch.optim.AdamW(
        [{"params": proposal_params, "lr": cfg.lr_proposal},
         {"params": rest, "lr": cfg.lr_text}],
        weight_decay=cfg.weight_decay)


def pretrain_step(model: FullModel, batch: dict, weights: LossWeights,
                  optimizer, cfg: RunConfig, rng: np.random.Generator) -> LossReport:
    optimizer.zero_grad()
    terms = compute_pretrain_losses(model, batch, cfg, rng)
    l_pre, report = compose_total(terms, weights)
    l_pre.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return report


def run_pretrain(scenes, cfg: RunConfig, out_dir, weights: LossWeights | None = None,
                 cache: list[SceneCache] | None = None) -> Path:
    """Pre-train on (scene, utterance) pairs; writes checkpoint + loss CSV."""
    weights = weights or LossWeights(cfg.weight_a, cfg.weight_b, cfg.weight_c, cfg.weight_d)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab()
    torch.manual_seed(cfg.seed)
    model = FullModel(cfg.model_config(len(vocab)))
    cache = cache if cache is not None else build_scene_cache(scenes, cfg)
    builder = BatchBuilder(cache, vocab, cfg)
    samples = utterance_samples(cache)
    optimizer = make_pretrain_optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, 1])

    trace = []
    with (out_dir / "pretrain_losses.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("epoch",) + LossReport.FIELDS)
        for epoch in range(cfg.pretrain_epochs):
            order = rng.permutation(len(samples))
            sums = np.zeros(len(LossReport.FIELDS))
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                batch = builder.utterance_batch([samples[i] for i in idx])
                report = pretrain_step(model, batch, weights, optimizer, cfg, rng)
                sums += [getattr(report, k) for k in LossReport.FIELDS]
                n_batches += 1
            means = sums / max(n_batches, 1)
            trace.append([epoch] + means.tolist())
            writer.writerow([epoch] + [f"{v:.6f}" for v in means])
    ckpt = out_dir / "pretrain.ckpt"
    save_checkpoint(ckpt, model, cfg, epoch=cfg.pretrain_epochs, loss_trace=trace)
    return ckpt


# checkpointing ---------------------------------------------------------------

def save_checkpoint(path, model: FullModel, cfg: RunConfig, epoch: int,
                    loss_trace=None) -> None:
    torch.save({
        "state_dict": model.state_dict(),
        "meta": {
            "seed": cfg.seed,
            "config_hash": config_hash(cfg),
            "epoch": epoch,
            "loss_trace": loss_trace or [],
            "model_config": asdict(model.cfg),
        },
    }, path)


def load_checkpoint(path, model: FullModel) -> dict:
    blob = torch.load(path, weights_only=False)
    state = blob["state_dict"]
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    mismatched = sorted(k for k in set(own) & set(state)
                        if own[k].shape != state[k].shape)
    if missing or unexpected or mismatched:
        raise ValueError(
            "checkpoint/model architecture mismatch: "
            f"missing={missing} unexpected={unexpected} shape-mismatch={mismatched}")
    model.load_state_dict(state)
    return blob["meta"]


# fine-tuning ------------------------------------------------------------------

def _finetune_loss(model: FullModel, task: str, batch: dict, cfg: RunConfig) -> torch.Tensor:
    f_o = model.proposal_encoder(batch["descriptors"])
    node = model.run_graph(f_o, batch["edge_index"], batch["edge_geo"])
    b = f_o.shape[0]
    if task == "ground":
        f_w, _ = model.text_encoder(batch["token_ids"], batch["lengths"])
        valid = _word_valid(batch["lengths"], batch["token_ids"].shape[1])
        fused = model.fusion(node, f_w, valid)
        scores = model.grounding_head(fused)
        return grounding_loss(scores, batch["grounding_targets"])
    if task == "caption":
        f_des_w, _ = model.text_encoder(batch["desc_ids"], batch["desc_lengths"])
        valid = _word_valid(batch["desc_lengths"], batch["desc_ids"].shape[1])
        fused = model.fusion(node, f_des_w, valid)
        obj_feat = fused[torch.arange(b), batch["referred_prop_idx"]]
        logits = model.caption_decoder.teacher_forced_logits(obj_feat, batch["caption_ids"])
        return caption_loss(logits, batch["caption_ids"], batch["caption_lengths"])
    if task == "qa":
        f_w, f_s = model.text_encoder(batch["token_ids"], batch["lengths"])
        valid = _word_valid(batch["lengths"], batch["token_ids"].shape[1])
        fused = model.fusion(node, f_w, valid)
        ans_logits = model.qa_head(fused, f_s)
        rel_node = node[torch.arange(b), batch["relevant_prop_idx"]]
        return qa_answer_loss(ans_logits, batch["answer_ids"]) \
            + info_nce(rel_node, f_s, cfg.tau)
    raise ValueError(f"unknown task {task!r}")


def run_finetune(task: str, scenes, cfg: RunConfig, out_dir,
                 checkpoint: Path | None = None,
                 cache: list[SceneCache] | None = None) -> Path:
    """Fine-tune on one task, from scratch or from a pre-trained checkpoint."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab()
    torch.manual_seed(cfg.seed)
    model = FullModel(cfg.model_config(len(vocab)))
    if checkpoint is not None:
        load_checkpoint(checkpoint, model)
    cache = cache if cache is not None else build_scene_cache(scenes, cfg)
    builder = BatchBuilder(cache, vocab, cfg)
    if task == "qa":
        samples = qa_samples(cache)
        make_batch = builder.qa_batch
    else:
        samples = utterance_samples(cache)
        make_batch = builder.utterance_batch

    head = {"ground": model.grounding_head, "caption": model.caption_decoder,
            "qa": model.qa_head}[task]
    head_ids = {id(p) for p in head.parameters()}
    rest = [p for p in model.parameters() if id(p) not in head_ids]
    if task == "qa":
        optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_finetune_rest,
                                      weight_decay=cfg.weight_decay)
    else:
        optimizer = torch.optim.AdamW(
            [{"params": list(head.parameters()), "lr": cfg.lr_finetune_head},
             {"params": rest, "lr": cfg.lr_finetune_rest}],
            weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])

    with (out_dir / f"finetune_{task}_losses.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for epoch in range(cfg.finetune_epochs):
            if task == "qa" and epoch == cfg.qa_lr_decay_epoch:
                for group in optimizer.param_groups:
                    group["lr"] *= cfg.qa_lr_decay_factor
            order = rng.permutation(len(samples))
            total, n_batches = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                batch = make_batch([samples[i] for i in idx])
                optimizer.zero_grad()
                loss = _finetune_loss(model, task, batch, cfg)
                if not torch.isfinite(loss):
                    raise RuntimeError(f"non-finite {task} fine-tune loss")
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                total += float(loss.detach())
                n_batches += 1
            writer.writerow([epoch, f"{total / max(n_batches, 1):.6f}"])
    ckpt = out_dir / f"finetune_{task}.ckpt"
    save_checkpoint(ckpt, model, cfg, epoch=cfg.finetune_epochs)
    return ckpt


# evaluation -------------------------------------------------------------------

@torch.no_grad()
def run_eval(task: str, model: FullModel, scenes, cfg: RunConfig,
             cache: list[SceneCache] | None = None) -> dict:
    """Metric report for one task on a scene set."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    model.eval()
    vocab = build_vocab()
    cache = cache if cache is not None else build_scene_cache(scenes, cfg)
    builder = BatchBuilder(cache, vocab, cfg)
    report: dict = {"task": task, "seed": cfg.seed}
    try:
        if task == "ground":
            samples = utterance_samples(cache)
            pred_boxes, gt_boxes = [], []
            for start in range(0, len(samples), cfg.batch_size):
                batch = builder.utterance_batch(samples[start:start + cfg.batch_size])
                f_o = model.proposal_encoder(batch["descriptors"])
                node = model.run_graph(f_o, batch["edge_index"], batch["edge_geo"])
                f_w, _ = model.text_encoder(batch["token_ids"], batch["lengths"])
                valid = _word_valid(batch["lengths"], batch["token_ids"].shape[1])
                scores = model.grounding_head(model.fusion(node, f_w, valid))
                picks = scores.argmax(dim=-1)
                for row, pick in enumerate(picks):
                    pred_boxes.append(batch["caches"][row].pset.proposals[int(pick)].box)
                gt_boxes.extend(batch["referred_boxes"])
            report["n_samples"] = len(gt_boxes)
            for k in (0.25, 0.5):
                report[f"acc@{k}"] = acc_at_kiou(pred_boxes, gt_boxes, k)
        elif task == "caption":
            samples = utterance_samples(cache)
            captions, gt_captions, pred_boxes, gt_boxes = [], [], [], []
            for start in range(0, len(samples), cfg.batch_size):
                batch = builder.utterance_batch(samples[start:start + cfg.batch_size])
                f_o = model.proposal_encoder(batch["descriptors"])
                node = model.run_graph(f_o, batch["edge_index"], batch["edge_geo"])
                f_des_w, _ = model.text_encoder(batch["desc_ids"], batch["desc_lengths"])
                valid = _word_valid(batch["desc_lengths"], batch["desc_ids"].shape[1])
                fused = model.fusion(node, f_des_w, valid)
                for row in range(fused.shape[0]):
                    ref = int(batch["referred_prop_idx"][row])
                    ids = model.caption_decoder.greedy_decode(
                        fused[row, ref], vocab.word_to_id["bos"], vocab.word_to_id["eos"])
                    captions.append([vocab.words[i] for i in ids])
                    pred_boxes.append(batch["caches"][row].pset.proposals[ref].box)
                for si, ui in samples[start:start + cfg.batch_size]:
                    utt = cache[si].scene.utterances[ui]
                    gt_captions.append(list(utt.tokens))
                    gt_boxes.append(next(o.box for o in cache[si].scene.objects
                                         if o.id == utt.referred_id))
            report["n_samples"] = len(gt_boxes)
            for metric in ("bleu4", "rougeL"):
                for k in (0.25, 0.5):
                    report[f"{metric}@{k}"] = m_at_kiou(
                        captions, gt_captions, pred_boxes, gt_boxes, k, metric)
        else:  # qa
            samples = qa_samples(cache)
            ranked, gts = [], []
            for start in range(0, len(samples), cfg.batch_size):
                batch = builder.qa_batch(samples[start:start + cfg.batch_size])
                f_o = model.proposal_encoder(batch["descriptors"])
                node = model.run_graph(f_o, batch["edge_index"], batch["edge_geo"])
                f_w, f_s = model.text_encoder(batch["token_ids"], batch["lengths"])
                valid = _word_valid(batch["lengths"], batch["token_ids"].shape[1])
                logits = model.qa_head(model.fusion(node, f_w, valid), f_s)
                order = logits.argsort(dim=-1, descending=True)
                for row in range(order.shape[0]):
                    ranked.append([ANSWER_SPACE[int(a)] for a in order[row]])
                gts.extend(batch["answers"])
            report["n_samples"] = len(gts)
            for k in (1, 10):
                report[f"em@{k}"] = em_at_k(ranked, gts, k)
    finally:
        model.train()
    return report


def eval_checkpoint(task: str, checkpoint, scenes, cfg: RunConfig) -> dict:
    vocab = build_vocab()
    model = FullModel(cfg.model_config(len(vocab)))
    meta = load_checkpoint(checkpoint, model)
    report = run_eval(task, model, scenes, cfg)
    report["checkpoint_epoch"] = meta["epoch"]
    return report


# ablations --------------------------------------------------------------------

OBJECTIVE_ARMS = {
    "scratch": None,
    "sg_mcl": LossWeights(1.0, 0.0, 1.0, 1.0),
    "mmm": LossWeights(0.0, 1.0, 1.0, 1.0),
    "sg_mcl_mmm": LossWeights(1.0, 1.0, 1.0, 1.0),
}


def run_arm(arm: str, train_scenes, val_scenes, cfg: RunConfig, out_dir,
            train_cache: list[SceneCache] | None = None,
            val_cache: list[SceneCache] | None = None) -> dict:
    """One pretrain(optional)+finetune+eval pipeline for a pre-training-objective arm."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_cache is None:
        train_cache = build_scene_cache(train_scenes, cfg)
    if val_cache is None:
        val_cache = build_scene_cache(val_scenes, cfg)
    weights = OBJECTIVE_ARMS[arm]
    ckpt = None
    if weights is not None:
        ckpt = run_pretrain(train_scenes, cfg, out_dir, weights, cache=train_cache)
    ft_ckpt = run_finetune("ground", train_scenes, cfg, out_dir, ckpt, cache=train_cache)
    vocab = build_vocab()
    model = FullModel(cfg.model_config(len(vocab)))
    meta = load_checkpoint(ft_ckpt, model)
    report = run_eval("ground", model, val_scenes, cfg, cache=val_cache)
    report.update(arm=arm, checkpoint_epoch=meta["epoch"])
    return report


def ablate_objectives(train_scenes, val_scenes, cfg: RunConfig, out_dir,
                  seeds=(0, 1, 2)) -> list[dict]:
    rows = []
    for seed in seeds:
        arm_cfg = apply_overrides(cfg, {"seed": str(seed)})
        train_cache = build_scene_cache(train_scenes, arm_cfg)
        val_cache = build_scene_cache(val_scenes, arm_cfg)
        for arm in OBJECTIVE_ARMS:
            rows.append(run_arm(arm, train_scenes, val_scenes, arm_cfg,
                                Path(out_dir) / f"{arm}_seed{seed}",
                                train_cache, val_cache))
    _write_rows(Path(out_dir) / "objectives.csv", rows)
    return rows


def ablate_depth(train_scenes, val_scenes, cfg: RunConfig, out_dir,
                 depths=(1, 2, 3, 4)) -> list[dict]:
    rows = []
    for depth in depths:
        depth_cfg = apply_overrides(cfg, {"n_graph_layers": str(depth)})
        row = run_arm("sg_mcl_mmm", train_scenes, val_scenes, depth_cfg,
                      Path(out_dir) / f"depth{depth}")
        row.update(n_graph_layers=depth)
        rows.append(row)
    _write_rows(Path(out_dir) / "depth.csv", rows)
    return rows


def ablate_layer_mode(train_scenes, val_scenes, cfg: RunConfig, out_dir,
                      modes=("gcn", "edge_conv")) -> list[dict]:
    rows = []
    for mode in modes:
        mode_cfg = apply_overrides(cfg, {"graph_layer_mode": mode})
        row = run_arm("sg_mcl_mmm", train_scenes, val_scenes, mode_cfg,
                      Path(out_dir) / f"mode_{mode}")
        row.update(graph_layer_mode=mode)
        rows.append(row)
    _write_rows(Path(out_dir) / "mode.csv", rows)
    return rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    keys = sorted({k for row in rows for k in row})
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
