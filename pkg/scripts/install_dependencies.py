#!/usr/bin/env python3
"""
Simple dependency installer for the PLDA scripts
"""

import subprocess
import sys

PACKAGES = {
    "torch": ("torch", "Models, autograd and the gradient reversal layer"),
    "numpy": ("numpy", "Dataset arrays and evaluation metrics"),
    "Pillow": ("PIL", "Shape rasterization and PNG dataset files"),
    "matplotlib": ("matplotlib", "Sweep curves, loss curves and histograms"),
    "rich": ("rich", "Enhanced terminal tables"),
}


def run_command(cmd):
    """Run a command and return success status"""
    try:
        result = subprocess.run(cmd, capture_output=True, text=True)
        return result.returncode == 0, result.stdout, result.stderr
    except Exception as e:
        return False, "", str(e)


def install_with_pip():
    """Try to install each package with pip"""
    print("Trying to install with pip...")
    for package in PACKAGES:
        print(f"Installing {package}...", end=" ")
        success, _, stderr = run_command([sys.executable, "-m", "pip", "install", package])
        if success:
            print("✓")
        else:
            print("✗")
            print(f"  Error: {stderr.strip().splitlines()[-1] if stderr.strip() else 'unknown'}")


def check_python_version():
    """argparse.BooleanOptionalAction needs 3.9"""
    version = sys.version_info
    if version < (3, 9):
        print(f"⚠ Python 3.9+ required, found {version.major}.{version.minor}")
        return False
    print(f"✓ Python {version.major}.{version.minor}.{version.micro}")
    return True


def check_imports():
    missing = []
    for package, (module, description) in PACKAGES.items():
        try:
            __import__(module)
            print(f"✓ {package} - {description}")
        except ImportError:
            missing.append(package)
            suffix = " (plain output fallback)" if package == "rich" else ""
            print(f"✗ {package} - {description}{suffix}")
    return missing


def main():
    print("🔧 PLDA Dependency Installer")
    print("=" * 40)

    if not check_python_version():
        return 1

    install_with_pip()

    print("\n📋 Testing imports...")
    missing = [p for p in check_imports() if p != "rich"]
    if missing:
        print(f"\n❌ Missing required packages: {', '.join(missing)}")
        return 1
    print("\n🎯 Ready to run plda.py!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
