"""
Console output helpers
======================

Coloured, emoji-prefixed progress messages shared by every module, plus the
banner and boxed section headers used by the CLI.

Dependencies:
    pip install colorama tqdm

Usage:
    from console import console

    console.log("🚀 Generating trajectories...")
    console.success("✓ Saved dataset")
"""

import os
from typing import Iterable, Optional

from colorama import Fore, Style, init
from tqdm import tqdm

init(autoreset=True)


def _env_flag(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() not in ("0", "false", "no", "off", "")


class Console:
    """Prints progress messages when verbose is enabled"""

    def __init__(self, verbose: Optional[bool] = None):
        self.verbose = _env_flag("LAGRANGIA_VERBOSE", True) if verbose is None else verbose

    def set_verbose(self, verbose: bool):
        self.verbose = verbose

    def log(self, message: str, color=Fore.YELLOW):
        """Log message if verbose is enabled"""
        if self.verbose:
            print(f"{color}{message}{Style.RESET_ALL}")

    def info(self, message: str):
        self.log(message, Fore.CYAN)

    def success(self, message: str):
        self.log(message, Fore.GREEN)

    def warn(self, message: str):
        self.log(f"⚠️ {message}", Fore.YELLOW)

    def error(self, message: str):
        # Errors are printed even in quiet mode
        print(f"{Fore.RED}❌ {message}{Style.RESET_ALL}")

    def section(self, title: str, icon: str = "📋"):
        """Print boxed section header"""
        if not self.verbose:
            return
        print(f"\n{Fore.CYAN}╔{'═'*78}╗")
        print(f"{Fore.CYAN}║ {icon} {title:<74}║")
        print(f"{Fore.CYAN}╚{'═'*78}╝{Style.RESET_ALL}\n")

    def banner(self):
        """Print startup banner"""
        if not self.verbose:
            return
        print(f"""
{Fore.CYAN}╔═══════════════════════════════════════════════════════════════════════════════╗
║                                                                               ║
║                     {Fore.GREEN}🧭  LAGRANGIA · SPARSE LAGRANGIAN FINDER{Fore.CYAN}                   ║
║                                                                               ║
║               {Fore.YELLOW}Trajectory data in, symbolic Lagrangian out{Fore.CYAN}                     ║
║                                                                               ║
╚═══════════════════════════════════════════════════════════════════════════════╝{Style.RESET_ALL}
""")

    def progress(self, iterable: Iterable, desc: str, total: Optional[int] = None):
        """Wrap an iterable in a tqdm bar that is silent in quiet mode"""
        return tqdm(iterable, desc=desc, total=total, disable=not self.verbose, leave=False, ncols=80)


console = Console()
