"""Stable parameter-group naming shared by both models.

Groups collect the weight/bias pair of one logical unit under a dotted name
(e.g. ``cap.dec.1.xattn.q``). Checkpoints, selective finetuning, and tests
address parameters through these names only.
"""

import hashlib

import numpy as np
import torch
from torch import nn

_LEAVES = ("weight", "bias")


class GroupedModel(nn.Module):
    group_prefix = ""
    # (old, new) substring rewrites applied to torch parameter names
    name_rewrites = ()

    def _group_and_leaf(self, param_name: str):
        if "." in param_name:
            head, leaf = param_name.rsplit(".", 1)
        else:
            head, leaf = param_name, "weight"
        if leaf not in _LEAVES:
            head, leaf = param_name, "weight"
        for old, new in self.name_rewrites:
            head = head.replace(old, new)
        return f"{self.group_prefix}.{head}", leaf

    def param_groups(self) -> dict:
        """``group name -> {leaf name -> parameter}`` over all parameters."""
        groups = {}
        for name, p in self.named_parameters():
            group, leaf = self._group_and_leaf(name)
            groups.setdefault(group, {})[leaf] = p
        return groups

    def select_params(self, patterns) -> list:
        """Parameters of every group whose name matches one of ``patterns``
        (exact name or substring)."""
        import re

        selected = []
        matched = set()
        for group, leaves in sorted(self.param_groups().items()):
            if any(re.search(pat, group) for pat in patterns):
                matched.add(group)
                selected.extend(leaves.values())
        if patterns and not matched:
            raise ValueError(f"no parameter group matches {patterns}")
        return selected

    def state_tensors(self) -> dict:
        """Float32 tensors keyed ``group.leaf`` for checkpointing."""
        out = {}
        for group, leaves in self.param_groups().items():
            for leaf, p in leaves.items():
                out[f"{group}.{leaf}"] = p.detach().cpu().numpy().astype(np.float32)
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        groups = self.param_groups()
        expected = {f"{g}.{leaf}" for g, leaves in groups.items() for leaf in leaves}
        missing = expected - set(tensors)
        if missing:
            raise KeyError(f"checkpoint missing parameter tensors: {sorted(missing)[:5]}")
        with torch.no_grad():
            for group, leaves in groups.items():
                for leaf, p in leaves.items():
                    arr = tensors[f"{group}.{leaf}"]
                    p.copy_(torch.as_tensor(arr, dtype=p.dtype).reshape(p.shape))

    def group_hashes(self) -> dict:
        """Content hash per group, for frozen-parameter checks."""
        out = {}
        for group, leaves in self.param_groups().items():
            h = hashlib.sha256()
            for leaf in sorted(leaves):
                h.update(leaves[leaf].detach().cpu().numpy().tobytes())
            out[group] = h.hexdigest()
        return out
