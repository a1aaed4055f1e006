"""Chart rendering for ringshard CSV output; see render.py."""

from .render import main, render_file  # noqa: F401
