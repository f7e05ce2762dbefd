"""Entry point for running cellsearch via `python -m cellsearch`."""

from .main import main


if __name__ == "__main__":
    main()
