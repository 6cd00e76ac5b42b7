from typing import List, Sequence

from kvpool.engine.state import RequestState


def admit_batch(
    queue: Sequence[RequestState], max_batch_tokens: int, max_batch_size: int
) -> List[RequestState]:
    """
    First-come-first-served prefill batch.

    Requests are taken from the head of the queue while the prompt tokens fit into
    max_batch_tokens and the batch has fewer than max_batch_size requests. A head
    request larger than max_batch_tokens is admitted alone, so nothing starves.
    """
    batch = []
    tokens = 0
    for state in queue:
        if len(batch) >= max_batch_size:
            break
        n = state.request.prompt_len
        if batch and tokens + n > max_batch_tokens:
            break
        batch.append(state)
        tokens += n
        if tokens >= max_batch_tokens:
            break
    return batch
