"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES = []


def record(key, ok, detail):
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    return ok


def order(line):
    key = line.split(":")[0].split()[1]
    num = "".join(ch for ch in key if ch.isdigit())
    return (int(num) if num else 99, key)
