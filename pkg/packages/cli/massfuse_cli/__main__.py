"""Allow running as `python3 -m massfuse_cli`."""

from massfuse_cli.main import app

app()
