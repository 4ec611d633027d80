"""Shared record of acceptance outcomes, printed at the end of the run."""

LOG: dict[str, str] = {}


def record(key: str, ok: bool, detail: str) -> None:
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    LOG[key] = line
    print(line)
