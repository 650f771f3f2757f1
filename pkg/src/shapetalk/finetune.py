"""Joint finetuning of captioner and diffuser.

Each iteration runs both reconstruction pipelines on independently drawn
batches and takes one optimizer step per model on the sum of the enabled
loss terms:

* L_TG — teacher-forced caption NLL (captioner only),
* L_IR — denoising loss with the soft-token caption condition (both models,
  gradients reach the captioner through the vocabulary transform),
* L_IG — denoising loss with the hard gold-token condition (diffuser only),
* L_TR — caption NLL on the one-step denoised image (both models, gradients
  reach the diffuser through the recovered image).

Per-model routing needs no masking: backpropagating the summed objective
already delivers each model exactly the gradient of the terms its parameters
participate in.
"""

import csv
import os
import statistics
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .checkpoints import load_checkpoint, save_checkpoint
from .metrics.text import CorpusStats, cider, tuple_f1
from .shapeworld.grammar import scene_tuples
from .models.captioner import caption_loss
from .models.diffuser import add_noise, one_step_x0
from .rngs import torch_stream
from .tokenizers import PAD, apply_transform

LOSS_NAMES = ("TG", "IR", "IG", "TR")
ABLATION_VARIANTS = {
    "full": ("TG", "IR", "IG", "TR"),
    "tg_only": ("TG",),
    "ir_only": ("IR",),
    "pipeline1": ("TG", "IR"),
    "pipeline2": ("IG", "TR"),
}
LOG_COLUMNS = ("iter", "L_TG", "L_IR", "L_IG", "L_TR", "val_cider", "val_clip_dist")

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


class FinetuneError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 5
    losses: tuple = LOSS_NAMES
    # selective finetuning defaults: cross-attention query projections
    theta_groups: tuple = (r"cap\.dec\.\d+\.xattn\.q$",)
    psi_groups: tuple = (r"dif\.unet\..*\.xattn\.q$",)
    optimizer: str = "adam"  # "sgd" is the plain test mode (exact fd deltas)
    seed: int = 0
    val_records: int = 64

    def __post_init__(self):
        unknown = set(self.losses) - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss switches {sorted(unknown)}")
        if not self.losses:
            raise ValueError("at least one loss term must be enabled")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass
class Batch:
    images: torch.Tensor  # (B, H, W, 3) float in [0, 1]
    sub_ids: torch.Tensor  # (B, L) captioner subword tokens
    word_ids: torch.Tensor  # (B, L) diffuser word tokens


def make_optimizers(captioner, diffuser, config: TrainConfig):
    theta = captioner.select_params(config.theta_groups)
    psi = diffuser.select_params(config.psi_groups)
    if config.optimizer == "sgd":
        return (torch.optim.SGD(theta, lr=config.lr),
                torch.optim.SGD(psi, lr=config.lr))
    return (torch.optim.Adam(theta, lr=config.lr),
            torch.optim.Adam(psi, lr=config.lr))


def _uniform_t(schedule, b, rng):
    return torch.randint(1, schedule.timesteps + 1, (b,), generator=rng)


def _check_finite(name, value):
    if not bool(torch.isfinite(value)):
        raise FinetuneError(f"non-finite loss {name}: {float(value.detach())}")
    return value


def compute_losses(captioner, diffuser, transform, batch_cap: Batch,
                   batch_dif: Batch, enabled, rng) -> dict:
    """The four Algorithm-1 loss terms (only the enabled ones) as a dict of
    scalar tensors still attached to the graph."""
    enabled = set(enabled)
    losses = {}

    # pipeline 1 (image -> text -> image): shared teacher-forced distributions
    if enabled & {"TG", "IR"}:
        dists = captioner(batch_cap.images, batch_cap.sub_ids)
        if "TG" in enabled:
            losses["TG"] = _check_finite("L_TG", caption_loss(dists, batch_cap.sub_ids))
        if "IR" in enabled:
            soft = apply_transform(transform, dists)
            t = _uniform_t(diffuser.schedule, len(batch_cap.images), rng)
            eps = torch.empty_like(batch_cap.images).normal_(generator=rng)
            losses["IR"] = _check_finite("L_IR", diffuser.loss_soft(
                batch_cap.images, soft, t, eps,
                pad_mask=batch_cap.sub_ids != PAD,
            ))

    # pipeline 2 (text -> image -> text): shared noising and noise prediction
    if enabled & {"IG", "TR"}:
        states, mask = diffuser.encode_text(batch_dif.word_ids)
        t = _uniform_t(diffuser.schedule, len(batch_dif.images), rng)
        eps = torch.empty_like(batch_dif.images).normal_(generator=rng)
        x_t = add_noise(diffuser.schedule, batch_dif.images, t, eps)
        eps_hat = diffuser.predict_noise(x_t, t, states, mask)
        if "IG" in enabled:
            losses["IG"] = _check_finite("L_IG", ((eps_hat - eps) ** 2).mean())
        if "TR" in enabled:
            # the recovered image stays attached so L_TR reaches the diffuser
            x0_hat = one_step_x0(diffuser.schedule, x_t, t, eps_hat)
            losses["TR"] = _check_finite("L_TR", caption_loss(
                captioner(x0_hat, batch_dif.sub_ids), batch_dif.sub_ids
            ))
    return losses


def joint_step(captioner, diffuser, transform, batch_cap: Batch,
               batch_dif: Batch, opt_theta, opt_psi, config: TrainConfig,
               rng) -> dict:
    """One Algorithm-1 iteration; returns the detached loss breakdown."""
    losses = compute_losses(captioner, diffuser, transform, batch_cap,
                            batch_dif, config.losses, rng)
    total = sum(losses.values())
    opt_theta.zero_grad(set_to_none=True)
    opt_psi.zero_grad(set_to_none=True)
    total.backward()
    opt_theta.step()
    opt_psi.step()
    out = {name: float(val.detach()) for name, val in losses.items()}
    out["total"] = float(total.detach())
    return out


def _draw_batch(dataset, records, indices, cap_tokenizer, dif_tokenizer, rng) -> Batch:
    recs = [records[i] for i in indices]
    picks = torch.randint(0, len(recs[0].captions), (len(recs),), generator=rng)
    texts = [r.captions[j] for r, j in zip(recs, picks.tolist())]
    images = torch.from_numpy(np.stack([dataset.image(r.id) for r in recs]))
    sub = torch.tensor([cap_tokenizer.encode(t) for t in texts], dtype=torch.long)
    word = torch.tensor([dif_tokenizer.encode(t) for t in texts], dtype=torch.long)
    return Batch(images, sub, word)


def _opt_state_tensors(opt, prefix) -> dict:
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        state = opt.state.get(p, {})
        for key, val in state.items():
            if isinstance(val, torch.Tensor):
                out[f"{prefix}/{i}/{key}"] = val.detach().cpu().numpy().astype(np.float32)
            else:
                out[f"{prefix}/{i}/{key}"] = np.asarray([val], dtype=np.int64)
    return out


def _load_opt_state(opt, tensors, prefix) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        head = f"{prefix}/{i}/"
        state = {}
        for key, arr in tensors.items():
            if key.startswith(head):
                leaf = key[len(head):]
                if leaf == "step" or arr.size == 1 and p.numel() != 1:
                    state[leaf] = torch.tensor(float(arr.reshape(-1)[0]))
                else:
                    state[leaf] = torch.as_tensor(arr).reshape(p.shape)
        if state:
            opt.state[p] = state


def evaluate_captioner(captioner, cap_tokenizer, dataset, records,
                       corpus_stats: CorpusStats) -> dict:
    images = torch.from_numpy(np.stack([dataset.image(r.id) for r in records]))
    with torch.no_grad():
        ids = captioner.generate(images, strategy="greedy")
    texts = [cap_tokenizer.decode(row.tolist()) for row in ids]
    return {
        "cider": sum(cider(t, r.captions, corpus_stats)
                     for t, r in zip(texts, records)) / len(records),
        "tuple_f1": sum(tuple_f1(t, scene_tuples(r.scene))
                        for t, r in zip(texts, records)) / len(records),
    }


def evaluate_diffuser(diffuser, dif_tokenizer, backends, dataset, records,
                      steps=20, guidance_scale=3.0, seed=0) -> dict:
    """Mean toy-CLIP distance between each generated image and its prompt."""
    texts = [r.captions[0] for r in records]
    cond = torch.tensor([dif_tokenizer.encode(t) for t in texts], dtype=torch.long)
    rng = torch_stream(seed, "eval_diffuser")
    images = diffuser.sample(cond_ids=cond, steps=steps,
                             guidance_scale=guidance_scale, rng=rng)
    with torch.no_grad():
        zi = backends.dual.embed_images(images)
        zt = backends.dual.embed_texts(torch.tensor(
            [backends.tokenizer.encode(t) for t in texts], dtype=torch.long))
    return {"clip_dist": float((1.0 - (zi * zt).sum(-1)).mean())}


def finetune(captioner, diffuser, transform, cap_tokenizer, dif_tokenizer,
             dataset, config: TrainConfig, out_dir=None, backends=None,
             resume_from=None):
    """Run the joint loop; returns the list of log rows.

    Checkpoints (with optimizer and rng state) are written per epoch when
    ``out_dir`` is given; ``resume_from`` restores one and continues.
    """
    train = dataset.split("train")
    val = dataset.split("val")[: config.val_records]
    corpus_stats = CorpusStats.from_corpus([r.captions for r in train])
    opt_theta, opt_psi = make_optimizers(captioner, diffuser, config)
    rng = torch_stream(config.seed, "finetune")
    start_epoch = 0
    log_rows = []

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        ckpt.load_into("captioner", captioner)
        ckpt.load_into("diffuser", diffuser)
        _load_opt_state(opt_theta, ckpt.tensors, "opt_theta")
        _load_opt_state(opt_psi, ckpt.tensors, "opt_psi")
        rng.set_state(torch.as_tensor(ckpt.tensors["rng/state"]))
        start_epoch = int(ckpt.meta["epoch"])
        log_rows = list(ckpt.meta.get("log_rows", []))

    iters_per_epoch = len(train) // config.batch_size
    initial = {}
    over_budget = {name: 0 for name in LOSS_NAMES}
    step = start_epoch * iters_per_epoch
    for epoch in range(start_epoch, config.epochs):
        perm_cap = torch.randperm(len(train), generator=rng)
        perm_dif = torch.randperm(len(train), generator=rng)
        for it in range(iters_per_epoch):
            lo = it * config.batch_size
            batch_cap = _draw_batch(dataset, train,
                                    perm_cap[lo:lo + config.batch_size].tolist(),
                                    cap_tokenizer, dif_tokenizer, rng)
            batch_dif = _draw_batch(dataset, train,
                                    perm_dif[lo:lo + config.batch_size].tolist(),
                                    cap_tokenizer, dif_tokenizer, rng)
            losses = joint_step(captioner, diffuser, transform, batch_cap,
                                batch_dif, opt_theta, opt_psi, config, rng)
            for name in config.losses:
                initial.setdefault(name, losses[name])
                if losses[name] > DIVERGENCE_FACTOR * max(initial[name], 1e-8):
                    over_budget[name] += 1
                    if over_budget[name] >= DIVERGENCE_PATIENCE:
                        raise FinetuneError(
                            f"L_{name} diverged: {losses[name]:.4g} > "
                            f"{DIVERGENCE_FACTOR}x initial {initial[name]:.4g} "
                            f"for {DIVERGENCE_PATIENCE} consecutive steps"
                        )
                else:
                    over_budget[name] = 0
            step += 1
            row = {"iter": step}
            for name in LOSS_NAMES:
                row[f"L_{name}"] = losses.get(name, "")
            row["val_cider"] = row["val_clip_dist"] = ""
            log_rows.append(row)
        if val:
            cap_eval = evaluate_captioner(captioner, cap_tokenizer, dataset,
                                          val, corpus_stats)
            log_rows[-1]["val_cider"] = cap_eval["cider"]
            if backends is not None:
                dif_eval = evaluate_diffuser(diffuser, dif_tokenizer, backends,
                                             dataset, val[:16], seed=config.seed)
                log_rows[-1]["val_clip_dist"] = dif_eval["clip_dist"]
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            extra = _opt_state_tensors(opt_theta, "opt_theta")
            extra.update(_opt_state_tensors(opt_psi, "opt_psi"))
            extra["rng/state"] = rng.get_state().numpy().astype(np.uint8)
            save_checkpoint(
                f"{out_dir}/finetune_ep{epoch + 1}.tstore",
                {"captioner": captioner, "diffuser": diffuser},
                meta={"epoch": epoch + 1, "config": asdict(config),
                      "log_rows": log_rows},
                transform=transform,
                extra_tensors=extra,
            )
    return log_rows


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in LOG_COLUMNS})


def ablate(load_base, transform, cap_tokenizer, dif_tokenizer, dataset,
           base_config: TrainConfig, backends=None, variants=None,
           seeds=(0, 1, 2), eval_records=64):
    """Train every variant from the same base weights over ``seeds`` and
    report mean and standard deviation per metric.

    ``load_base`` is a zero-argument callable returning freshly initialized
    (captioner, diffuser) copies of the base checkpoints.
    """
    variants = variants or ABLATION_VARIANTS
    train = dataset.split("train")
    val = dataset.split("val")[:eval_records]
    corpus_stats = CorpusStats.from_corpus([r.captions for r in train])
    rows = []
    for name, losses in variants.items():
        metrics = {}
        for seed in seeds:
            captioner, diffuser = load_base()
            config = TrainConfig(
                lr=base_config.lr, batch_size=base_config.batch_size,
                epochs=base_config.epochs, losses=tuple(losses),
                theta_groups=base_config.theta_groups,
                psi_groups=base_config.psi_groups,
                optimizer=base_config.optimizer, seed=seed,
                val_records=0,
            )
            finetune(captioner, diffuser, transform, cap_tokenizer,
                     dif_tokenizer, dataset, config)
            result = evaluate_captioner(captioner, cap_tokenizer, dataset,
                                        val, corpus_stats)
            if backends is not None:
                result.update(evaluate_diffuser(
                    diffuser, dif_tokenizer, backends, dataset, val[:16],
                    seed=seed))
            for metric, value in result.items():
                metrics.setdefault(metric, []).append(value)
        for metric, values in metrics.items():
            rows.append({
                "variant": name, "metric": metric,
                "mean": statistics.fmean(values),
                "sd": statistics.stdev(values) if len(values) > 1 else 0.0,
            })
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=("variant", "metric", "mean", "sd"))
        w.writeheader()
        w.writerows(rows)
