"""
experiments/
One module per lab command. Each exposes run(ctx) and records its reports,
tables and PASS-gated checks on ctx.bundle.
"""
