"""Training-free reconstruction ranking.

Caption candidates are scored by how well the image they induce through the
diffuser matches the source image (image-text-image), and image candidates
by how well their beam-search caption matches the source text
(text-image-text). The rank-1 candidate is the selected output.
"""

import csv
from dataclasses import dataclass, field

import torch
from scipy import stats as sstats

from .metrics.encoders import image_similarity, text_similarity
from .metrics.image import MIN_FID_SAMPLES, frechet_distance, inception_score
from .metrics.text import CorpusStats, bleu, cider, tuple_f1
from .shapeworld.grammar import scene_tuples
from .rngs import torch_stream

DEFAULT_N = 10
CORRELATION_COLUMNS = ("input_id", "candidate_idx", "rank", "similarity",
                       "metric_name", "metric_value")
SELECTION_COLUMNS = ("domain", "metric", "baseline", "ours", "gain_pct")

# metrics where a smaller value is better (gain sign flips)
LOWER_IS_BETTER = frozenset({"clip_dist", "fid"})


class GenerationError(Exception):
    pass


@dataclass
class System:
    """The frozen model pair plus both tokenizers."""

    captioner: object
    diffuser: object
    cap_tokenizer: object  # subword, captioner side
    dif_tokenizer: object  # word-level, diffuser side

    def caption_texts(self, images, **generate_kwargs):
        ids = self.captioner.generate(images, **generate_kwargs)
        return [self.cap_tokenizer.decode(row.tolist()) for row in ids]

    def diffuse(self, texts, rng, steps, guidance_scale):
        cond = torch.tensor(
            [self.dif_tokenizer.encode(t) for t in texts], dtype=torch.long
        )
        return self.diffuser.sample(
            cond_ids=cond, steps=steps, guidance_scale=guidance_scale, rng=rng
        )


@dataclass
class RankedCandidate:
    candidate: object  # caption text or image tensor
    reconstruction: object  # image tensor or caption text
    similarity: float
    rank: int
    scores: dict = field(default_factory=dict)


def _assign_ranks(candidates, reconstructions, sims):
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    ranked = [None] * len(sims)
    for rank0, i in enumerate(order):
        ranked[rank0] = RankedCandidate(
            candidate=candidates[i],
            reconstruction=reconstructions[i],
            similarity=float(sims[i]),
            rank=rank0 + 1,
        )
    return ranked


def rank_captions(system, backends, image, n=DEFAULT_N, sampler="top_p",
                  sampler_params=None, backend="clip", rng=None,
                  steps=50, guidance_scale=3.0):
    """Sample ``n`` captions for one image, reconstruct an image from each,
    and rank by reconstruction similarity to the source (rank 1 = best)."""
    if n < 1:
        raise ValueError(f"need n >= 1 candidates, got {n}")
    images = image.unsqueeze(0).expand(n, -1, -1, -1)
    texts = system.caption_texts(images, strategy=sampler, rng=rng,
                                 **(sampler_params or {}))
    try:
        recons = system.diffuse(texts, rng, steps, guidance_scale)
    except Exception as e:
        raise GenerationError(f"image generation failed for candidates {texts!r}") from e
    if backend == "random":
        sims = torch.rand(n, generator=rng).tolist()
    else:
        enc = backends.image_encoder(backend)
        sims = image_similarity(enc, images, recons).tolist()
    return _assign_ranks(texts, list(recons), sims)


def rank_images(system, backends, text, n=DEFAULT_N, backend="clip", rng=None,
                steps=50, guidance_scale=3.0, beam=3):
    """Generate ``n`` images for one text, caption each by beam search, and
    rank by caption similarity to the source text."""
    if n < 1:
        raise ValueError(f"need n >= 1 candidates, got {n}")
    try:
        images = system.diffuse([text] * n, rng, steps, guidance_scale)
    except Exception as e:
        raise GenerationError(f"image generation failed for text {text!r}") from e
    recon_texts = system.caption_texts(images, strategy="beam", beam=beam)
    if backend == "random":
        sims = torch.rand(n, generator=rng).tolist()
    else:
        sims = text_similarity(
            backends.dual, backends.tokenizer, [text] * n, recon_texts
        ).tolist()
    return _assign_ranks(list(images), recon_texts, sims)


def caption_scores(candidate, record, corpus_stats, metrics=("cider", "bleu", "tuple_f1")):
    out = {}
    for m in metrics:
        if m == "cider":
            out[m] = cider(candidate, record.captions, corpus_stats)
        elif m == "bleu":
            out[m] = bleu(candidate, record.captions)
        elif m == "tuple_f1":
            out[m] = tuple_f1(candidate, scene_tuples(record.scene))
        else:
            raise ValueError(f"unknown caption metric {m!r}")
    return out


@dataclass
class CorrelationTable:
    n: int
    sampler: str
    backend: str
    rows: list  # dict rows matching CORRELATION_COLUMNS
    bucket_means: dict  # metric -> list of per-rank means (index 0 = rank 1)
    bucket_counts: list

    def spearman(self, metric: str) -> float:
        """Spearman rho between rank bucket (1..N) and its mean score."""
        means = self.bucket_means[metric]
        if len(set(means)) == 1:
            return 0.0
        return float(sstats.spearmanr(range(1, self.n + 1), means).statistic)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CORRELATION_COLUMNS)
            w.writeheader()
            w.writerows(self.rows)


def correlation_study(system, backends, dataset, records, corpus_stats,
                      n=DEFAULT_N, sampler="top_p", sampler_params=None,
                      backend="clip", metrics=("cider", "bleu", "tuple_f1"),
                      seed=0, steps=50, guidance_scale=3.0):
    """Insight-I style study: bucket candidates by reconstruction rank and
    aggregate caption quality per bucket over the whole record list."""
    if n < 2:
        raise ValueError(f"need n >= 2 for a correlation study, got {n}")
    rows = []
    sums = {m: [0.0] * n for m in metrics}
    for record in records:
        rng = torch_stream(seed, "rank", record.id)
        image = torch.from_numpy(dataset.image(record.id))
        ranked = rank_captions(
            system, backends, image, n=n, sampler=sampler,
            sampler_params=sampler_params, backend=backend, rng=rng,
            steps=steps, guidance_scale=guidance_scale,
        )
        for idx, cand in enumerate(ranked):
            cand.scores = caption_scores(cand.candidate, record, corpus_stats, metrics)
            for m in metrics:
                sums[m][cand.rank - 1] += cand.scores[m]
                rows.append({
                    "input_id": record.id, "candidate_idx": idx,
                    "rank": cand.rank, "similarity": cand.similarity,
                    "metric_name": m, "metric_value": cand.scores[m],
                })
    count = len(records)
    means = {m: [s / count for s in sums[m]] for m in metrics}
    return CorrelationTable(n, sampler, backend, rows, means, [count] * n)


def _gain_pct(metric, baseline, ours):
    if baseline == 0.0:
        return 0.0
    gain = (ours - baseline) / abs(baseline) * 100.0
    return -gain if metric in LOWER_IS_BETTER else gain


def selection_vs_baseline(system, backends, dataset, domain_records,
                          corpus_stats, n=DEFAULT_N, sampler="top_p",
                          sampler_params=None, backend="clip",
                          metrics=("cider", "bleu", "tuple_f1"), seed=0,
                          steps=50, guidance_scale=3.0):
    """Caption-direction comparison: per-domain mean score of the rank-1
    selection vs the mean over all candidates ("baseline sampling")."""
    per_domain = {}
    for domain, records in domain_records.items():
        base = {m: 0.0 for m in metrics}
        ours = {m: 0.0 for m in metrics}
        for record in records:
            rng = torch_stream(seed, "rank", record.id)
            image = torch.from_numpy(dataset.image(record.id))
            ranked = rank_captions(
                system, backends, image, n=n, sampler=sampler,
                sampler_params=sampler_params, backend=backend, rng=rng,
                steps=steps, guidance_scale=guidance_scale,
            )
            for cand in ranked:
                cand.scores = caption_scores(cand.candidate, record, corpus_stats, metrics)
            for m in metrics:
                base[m] += sum(c.scores[m] for c in ranked) / len(ranked)
                ours[m] += next(c for c in ranked if c.rank == 1).scores[m]
        k = len(records)
        per_domain[domain] = ({m: v / k for m, v in base.items()},
                              {m: v / k for m, v in ours.items()})

    all_domains = list(domain_records)
    total = sum(len(domain_records[d]) for d in all_domains)
    rows = []
    overall_base = {m: 0.0 for m in metrics}
    overall_ours = {m: 0.0 for m in metrics}
    for d in all_domains:
        b, o = per_domain[d]
        w = len(domain_records[d]) / total
        for m in metrics:
            overall_base[m] += w * b[m]
            overall_ours[m] += w * o[m]
            rows.append({"domain": d, "metric": m, "baseline": b[m],
                         "ours": o[m], "gain_pct": _gain_pct(m, b[m], o[m])})
    for m in metrics:
        rows.append({"domain": "overall", "metric": m,
                     "baseline": overall_base[m], "ours": overall_ours[m],
                     "gain_pct": _gain_pct(m, overall_base[m], overall_ours[m])})
    return rows


def image_selection_vs_baseline(system, backends, dataset, domain_records,
                                n=DEFAULT_N, backend="clip", seed=0, steps=50,
                                guidance_scale=3.0, beam=3):
    """Image-direction comparison: toy-CLIP distance (1 - text/image cosine),
    Frechet distance, and the inception-style score, for rank-1 selections vs
    the candidate average."""
    rows = []
    for domain, records in domain_records.items():
        by_rank = [[] for _ in range(n)]
        real = []
        dist_base = dist_ours = 0.0
        for record in records:
            rng = torch_stream(seed, "rank_img", record.id)
            text = record.captions[0]
            ranked = rank_images(system, backends, text, n=n, backend=backend,
                                 rng=rng, steps=steps,
                                 guidance_scale=guidance_scale, beam=beam)
            images = torch.stack([c.candidate for c in ranked])
            with torch.no_grad():
                zi = backends.dual.embed_images(images)
                zt = backends.dual.embed_texts(torch.tensor(
                    [backends.tokenizer.encode(text)], dtype=torch.long))
            dists = (1.0 - zi @ zt.T.squeeze(-1)).squeeze(-1)
            top = next(i for i, c in enumerate(ranked) if c.rank == 1)
            dist_base += float(dists.mean())
            dist_ours += float(dists[top])
            for c in ranked:
                by_rank[c.rank - 1].append(c.candidate)
            real.append(torch.from_numpy(dataset.image(record.id)))
        k = len(records)
        rows.append({"domain": domain, "metric": "clip_dist",
                     "baseline": dist_base / k, "ours": dist_ours / k,
                     "gain_pct": _gain_pct("clip_dist", dist_base / k, dist_ours / k)})
        if len(real) >= MIN_FID_SAMPLES:
            # the candidate-average baseline for the set-level metrics is the
            # mean over rank buckets, each the same size as the rank-1
            # selection: FID and the inception-style score are biased in the
            # sample count, so a pooled all-candidates set is not comparable
            with torch.no_grad():
                f_real = backends.clf.features(torch.stack(real)).numpy()
                fids, iss = [], []
                for bucket in by_rank:
                    stacked = torch.stack(bucket)
                    fids.append(frechet_distance(
                        f_real, backends.clf.features(stacked).numpy()))
                    iss.append(inception_score(
                        backends.clf.shape_class_probs(stacked).numpy()))
            fid_b, fid_o = sum(fids) / n, fids[0]
            rows.append({"domain": domain, "metric": "fid", "baseline": fid_b,
                         "ours": fid_o, "gain_pct": _gain_pct("fid", fid_b, fid_o)})
            is_b, is_o = sum(iss) / n, iss[0]
            rows.append({"domain": domain, "metric": "is", "baseline": is_b,
                         "ours": is_o, "gain_pct": _gain_pct("is", is_b, is_o)})
    return rows


def write_selection_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SELECTION_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def sweep(system, backends, dataset, domain_records, corpus_stats, parameter,
          values, n=DEFAULT_N, sampler="top_p", seed=0, steps=50,
          guidance_scale=3.0):
    """Grid over one knob (``p``, ``n``, or ``sampler``); each value runs the
    caption-direction selection comparison and contributes its overall rows."""
    if parameter not in ("p", "n", "sampler"):
        raise ValueError(f"unknown sweep parameter {parameter!r}")
    rows = []
    for value in values:
        kwargs = dict(n=n, sampler=sampler, sampler_params=None, seed=seed,
                      steps=steps, guidance_scale=guidance_scale)
        if parameter == "p":
            kwargs["sampler"] = "top_p"
            kwargs["sampler_params"] = {"p": value}
        elif parameter == "n":
            kwargs["n"] = int(value)
        else:
            kwargs["sampler"] = value
        table = selection_vs_baseline(system, backends, dataset,
                                      domain_records, corpus_stats, **kwargs)
        for r in table:
            rows.append({"parameter": parameter, "value": value, **r})
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=("parameter", "value") + SELECTION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
