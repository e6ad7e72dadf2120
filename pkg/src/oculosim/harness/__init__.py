"""Command-line orchestration: forge, train, eval and report."""
