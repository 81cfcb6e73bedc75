"""Incremental constituent stack and stack tape.

The runtime state behind tape-augmented attention: a stack of contiguous
constituents over tokens 0..k and a per-token depth tape. `update_stack_tape`
is the single mutation path; everything else (replay, candidate masks, debug
traces) is built on top of it.

Trees are plain values: a leaf is an int token index, an internal node is a
(left, right) tuple.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AttachmentError(ValueError):
    """Raised when an attachment target is not a legal reduce site."""


# --------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class StackState:
    """Immutable snapshot of the incremental parse.

    tape[j] is token j's leaf depth inside its containing stack constituent.
    stack holds the constituents bottom-to-top as ordered index tuples; they
    partition 0..k into contiguous spans.
    """

    tape: tuple[int, ...] = ()
    stack: tuple[tuple[int, ...], ...] = ()

    @property
    def n_tokens(self):
        return len(self.tape)


def update_stack_tape(state, k, r_k):
    """Apply token k's attachment decision r_k and return the new state.

    r_k == k shifts: a fresh singleton constituent at depth 0. r_k < k
    reduces: constituents are popped and merged into the one ending at r_k,
    every token of the growing constituent gaining one depth level per pop.
    """
    if k != state.n_tokens:
        raise ValueError(f"expected token index {state.n_tokens}, got {k}")
    if not 0 <= r_k <= k:
        raise AttachmentError(f"attachment {r_k} outside [0, {k}]")

    if r_k == k:
        return StackState(state.tape + (0,), state.stack + ((k,),))

    if all(c[-1] != r_k for c in state.stack):
        raise AttachmentError(
            f"attachment {r_k} is not the rightmost token of any stack constituent"
        )

    tape = list(state.tape) + [0]
    stack = list(state.stack)
    merged = [k]
    while True:
        top = stack.pop()
        merged = list(top) + merged
        for j in merged:
            tape[j] += 1
        if top[-1] == r_k:
            break
    stack.append(tuple(merged))
    return StackState(tuple(tape), tuple(stack))


def candidate_mask(state, k):
    """Boolean mask over positions 0..k of legal attachment targets.

    True at the rightmost token of each stack constituent and at k itself
    (the shift slot), so the count of true entries is stack height + 1.
    """
    if k != state.n_tokens:
        raise ValueError(f"expected token index {state.n_tokens}, got {k}")
    mask = np.zeros(k + 1, dtype=bool)
    for c in state.stack:
        mask[c[-1]] = True
    mask[k] = True
    return mask


# --------------------------------------------------------------------------
# replay


def replay(r):
    """Run a full attachment sequence and rebuild the trees it encodes.

    Returns (final state, forest): one reconstructed binary tree per stack
    constituent, bottom to top, so a fully reducing sequence yields a
    single-element list. Each merge during a reduce creates
    node(popped, accumulated).
    """
    state = StackState()
    trees = []
    for k, r_k in enumerate(r):
        try:
            new_state = update_stack_tape(state, k, r_k)
        except AttachmentError as err:
            raise AttachmentError(f"step {k}: {err}") from None
        if r_k == k:
            trees.append(k)
        else:
            acc = k
            while state.stack[len(trees) - 1][-1] != r_k:
                acc = (trees.pop(), acc)
            acc = (trees.pop(), acc)
            trees.append(acc)
        state = new_state
    return state, trees


def debug_trace(r):
    """Per-step dump, one line per token: `k r_k tape=[...] stack=[[..],[..]]`."""
    state = StackState()
    lines = []
    for k, r_k in enumerate(r):
        state = update_stack_tape(state, k, r_k)
        tape = list(state.tape)
        stack = [list(c) for c in state.stack]
        lines.append(f"{k} {r_k} tape={tape} stack={stack}")
    return "\n".join(lines) + "\n"
