"""Base (pre-finetuning) training loops for the two models.

The captioner is trained supervised on teacher-forced caption NLL only; the
diffuser on the hard-conditioned denoising loss with condition dropout so
that classifier-free guidance has a null branch to mix against.
"""

import numpy as np
import torch

from .models.captioner import caption_loss
from .rngs import torch_stream

CONDITION_DROPOUT = 0.1


def _epoch_batches(n, batch_size, rng):
    order = torch.randperm(n, generator=rng)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size].tolist()


def _texts_for(records, indices, rng):
    recs = [records[i] for i in indices]
    picks = torch.randint(0, len(recs[0].captions), (len(recs),), generator=rng)
    return recs, [r.captions[j] for r, j in zip(recs, picks.tolist())]


def train_captioner(captioner, tokenizer, dataset, seed=0, epochs=30,
                    batch_size=32, lr=3e-4, log=None):
    """Supervised teacher-forced training on the train split."""
    train = dataset.split("train")
    rng = torch_stream(seed, "train_captioner")
    opt = torch.optim.Adam(captioner.parameters(), lr=lr)
    images_all = torch.from_numpy(np.stack([dataset.image(r.id) for r in train]))
    for epoch in range(epochs):
        total = count = 0.0
        for sel in _epoch_batches(len(train), batch_size, rng):
            _, texts = _texts_for(train, sel, rng)
            y = torch.tensor([tokenizer.encode(t) for t in texts], dtype=torch.long)
            opt.zero_grad(set_to_none=True)
            loss = caption_loss(captioner(images_all[sel], y), y)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        if log is not None:
            log(epoch, total / max(count, 1))
    captioner.eval()
    return captioner


def train_diffuser(diffuser, tokenizer, dataset, seed=0, epochs=60,
                   batch_size=32, lr=2e-4, cond_dropout=CONDITION_DROPOUT,
                   log=None):
    """Hard-conditioned denoising training with per-sample condition dropout
    (dropped samples see the learned null condition)."""
    train = dataset.split("train")
    rng = torch_stream(seed, "train_diffuser")
    opt = torch.optim.Adam(diffuser.parameters(), lr=lr)
    images_all = torch.from_numpy(np.stack([dataset.image(r.id) for r in train]))
    sched = diffuser.schedule
    for epoch in range(epochs):
        total = count = 0.0
        for sel in _epoch_batches(len(train), batch_size, rng):
            _, texts = _texts_for(train, sel, rng)
            ids = torch.tensor([tokenizer.encode(t) for t in texts], dtype=torch.long)
            x0 = images_all[sel]
            b = len(sel)
            states, mask = diffuser.encode_text(ids)
            drop = torch.rand(b, generator=rng) < cond_dropout
            if bool(drop.any()):
                null_states, null_mask = diffuser.null_condition(b)
                states = torch.where(drop[:, None, None], null_states, states)
                mask = torch.where(drop[:, None], null_mask, mask)
            t = torch.randint(1, sched.timesteps + 1, (b,), generator=rng)
            eps = torch.empty_like(x0).normal_(generator=rng)
            opt.zero_grad(set_to_none=True)
            loss = diffuser.denoise_loss(x0, t, eps, states, mask)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        if log is not None:
            log(epoch, total / max(count, 1))
    diffuser.eval()
    return diffuser
