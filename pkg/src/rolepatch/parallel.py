"""Order-preserving process-pool map.

Work items are independent forward passes, so results do not depend on
which worker ran them; collecting them in submission order keeps every
downstream reduction identical for any worker count.
"""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, Sequence

_CTX: Any = None


def _init(ctx: Any) -> None:
    global _CTX
    _CTX = ctx


def _call(args: tuple[Callable, Any]) -> Any:
    fn, item = args
    return fn(_CTX, item)


def ordered_map(fn: Callable[[Any, Any], Any], items: Sequence[Any], ctx: Any, workers: int = 1) -> list:
    """``[fn(ctx, item) for item in items]``, optionally spread over ``workers`` forked processes.

    ``fn`` must be a module-level function. ``ctx`` reaches workers through
    fork inheritance, so it is never pickled.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(ctx, it) for it in items]
    pool_ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=pool_ctx, initializer=_init, initargs=(ctx,)) as ex:
        return list(ex.map(_call, ((fn, it) for it in items), chunksize=max(1, len(items) // (4 * workers))))


def chunked(seq: Iterable[Any], n: int) -> list[list[Any]]:
    seq = list(seq)
    return [seq[i : i + n] for i in range(0, len(seq), n)]
