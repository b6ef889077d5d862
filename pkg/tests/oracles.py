"""Reference implementations used only by tests.

They are deliberately naive (Python loops, float64 throughout) and share no
code with the package beyond the data they are handed.
"""

import math

import numpy as np


def exhaustive_topk(vectors, ids, query, k):
    """Score every row in float64 and sort by (-score, id)."""
    q = np.asarray(query, dtype=np.float64)
    qn = math.sqrt(float(q @ q))
    scored = []
    for vec, eid in zip(vectors, ids):
        v = np.asarray(vec, dtype=np.float64)
        scored.append((-(float(v @ q) / (math.sqrt(float(v @ v)) * qn)), int(eid)))
    scored.sort()
    return [eid for _, eid in scored[:k]]


def unimodal_ranking(query_emb, entries, embed, k):
    """Rank entries by cosine between one modality's query and entry embeddings."""
    q = np.asarray(query_emb, dtype=np.float64)
    scored = []
    for e in entries:
        v = np.asarray(embed(e), dtype=np.float64)
        scored.append((-(float(v @ q) / (np.linalg.norm(v) * np.linalg.norm(q))), e.entry_id))
    scored.sort()
    return [eid for _, eid in scored[:k]]


def softmax_policy_objective(logits, old_probs, ref_probs, groups, eps, beta, temp):
    """Objective recomputed from scratch for finite-difference checks."""
    z = np.asarray(logits, dtype=np.float64) / temp
    p = np.exp(z - z.max())
    p /= p.sum()
    kl = float(np.sum(p * np.log(p / ref_probs)))
    total = 0.0
    for actions, advantages in groups:
        terms = []
        for a, adv in zip(actions, advantages):
            rho = p[a] / old_probs[a]
            terms.append(min(rho * adv, min(max(rho, 1 - eps), 1 + eps) * adv))
        total += sum(terms) / len(terms) - beta * kl
    return total / len(groups)
