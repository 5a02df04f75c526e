"""Collects the PASS/FAIL/BLOCKED lines of the acceptance suite for the terminal summary."""
LINES = []


def record(line):
    LINES.append(line)
    print(line)
