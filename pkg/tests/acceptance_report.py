"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import contextlib
import time

RESULTS = []


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS if the block finishes, FAIL (with the error) if it raises."""
    start = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        line = f"criterion {number:>2} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        RESULTS.append(line)
        print(line)
        raise
    elapsed = time.perf_counter() - start
    detail = f" [{'; '.join(notes)}]" if notes else ""
    line = f"criterion {number:>2} PASS  {title} ({elapsed:.1f}s){detail}"
    RESULTS.append(line)
    print(line)
