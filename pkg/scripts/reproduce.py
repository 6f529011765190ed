import subprocess
import sys


def run_command(command):
    """Run a shell command and print output."""
    try:
        result = subprocess.run(
            command, shell=True, check=True, text=True, capture_output=True
        )
        print(result.stdout)
        return True
    except subprocess.CalledProcessError as e:
        print(f"Error (exit {e.returncode}): {e.stderr}", file=sys.stderr)
        return False


def main():
    """Run the desk-scale checks and experiments into results/."""
    out = sys.argv[1] if len(sys.argv) > 1 else "results"

    print("Checking identities...")
    if not run_command(f"fiem check --suite identities --out {out}/check_identities.json"):
        return 1

    print("\nPlanning step sizes (n=1000, K_max=20n)...")
    if not run_command(
        "fiem plan --n 1000 --kmax 20000 --vmin 1 --L 1 --Lv 1 "
        f"--scan-mu 0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45 --out {out}/scan_mu.csv"
    ):
        return 1

    print("\nRunning the desk toy preset...")
    if not run_command(f"fiem toy --preset desk --seed 0 --out {out}/toy"):
        return 1

    print("\nRunning a synthetic GMM table...")
    if not run_command(
        f"fiem gmm --synthetic 0,2000,3,5,3.0 --g 3 --epochs 20 --batch 100 --kswitch 2 "
        f"--replicas 2 --out {out}/gmm"
    ):
        return 1

    # Monte Carlo checks are the slow part
    response = input("\nRun the Monte Carlo check suites too? (y/N): ")
    if response.lower() == "y":
        print("\nRunning descent and mean-field suites...")
        if not run_command(f"fiem check --suite all --scale desk --out {out}/check_all.json"):
            return 1
    else:
        print("\nSkipping Monte Carlo checks.")
    print(f"\nResults written to {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
