import argparse
import os
from pathlib import Path

from dotenv import load_dotenv

from ccopf.gridlib import CaseSemanticError, CaseSyntaxError, fetch_case_text, parse_case

load_dotenv()
MIRROR_URL_BASE = os.environ.get(
    "CCOPF_CASE_MIRROR", "https://raw.githubusercontent.com/MATPOWER/matpower/master/data"
)

DEFAULT_CASE = "case24_ieee_rts"


def build_case_url(name: str, base: str = MIRROR_URL_BASE) -> str:
    """Build the download URL for a named case; full URLs are passed through."""
    if name.startswith(("http://", "https://")):
        return name

    stem = name.removesuffix(".m")
    return f"{base.rstrip('/')}/{stem}.m"


def fetch_case(name: str, dest_dir: Path) -> Path:
    """
    Download a MATPOWER case, check that it parses, and write it to `dest_dir`.

    Nothing is written if the downloaded text is not a usable case.
    """
    url = build_case_url(name)
    text = fetch_case_text(url)

    stem = Path(url.rsplit("/", maxsplit=1)[-1]).stem
    try:
        case = parse_case(text, name=stem)
    except (CaseSyntaxError, CaseSemanticError) as e:
        raise RuntimeError(f"Downloaded case from {url} did not parse") from e

    dest_dir.mkdir(parents=True, exist_ok=True)
    dest = dest_dir / f"{stem}.m"
    dest.write_text(text)
    print(f"Case '{case.name}' ({case.n_bus} buses) written to '{dest}'")
    return dest


def main() -> None:  # noqa: D103
    description = "Download a MATPOWER case file by name or URL."
    epilog = "NOTE: Set CCOPF_CASE_MIRROR to download from a different case repository."
    parser = argparse.ArgumentParser(description=description, epilog=epilog)
    parser.add_argument("name", type=str, nargs="?", default=DEFAULT_CASE)
    parser.add_argument("--dest", type=Path, default=Path("./cases"))
    args = parser.parse_args()

    fetch_case(args.name, args.dest)


if __name__ == "__main__":
    main()
