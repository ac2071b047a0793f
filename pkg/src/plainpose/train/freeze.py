from __future__ import annotations

from ..core.params import ParamStore

KNOWN_GROUPS = frozenset({"embed", "mhsa", "ffn", "norm", "head", "mim", "distill", "token"})
# transferred knowledge tokens stay frozen whatever the mode
ALWAYS_FROZEN = frozenset({"token"})


class UnlabeledParamError(ValueError):
    pass


def apply_freeze(store: ParamStore, mode: str) -> dict[str, bool]:
    """Set trainable flags for a fine-tuning mode and return the name -> trainable mask.

    ``mhsa`` freezes every attention projection (qkv and output, weights and
    biases), ``ffn`` freezes both MLP layers. Norms, embeddings and heads stay
    trainable in every mode.
    """
    if mode not in ("none", "mhsa", "ffn"):
        raise ValueError(f"unknown freeze mode {mode!r}")
    mask = {}
    for name, entry in store.entries():
        if entry.group not in KNOWN_GROUPS:
            raise UnlabeledParamError(f"parameter {name!r} has no recognised submodule label ({entry.group!r})")
        if entry.buffer:
            continue
        flag = entry.group != mode and entry.group not in ALWAYS_FROZEN
        store.set_trainable(name, flag)
        mask[name] = flag
    return mask


def freeze_all(store: ParamStore) -> None:
    for name, _ in store.params():
        store.set_trainable(name, False)
