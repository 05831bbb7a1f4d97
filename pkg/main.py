"""Top-level launcher for the kws command line.

Forwards all arguments to kws.cli.main. Example usage:

  python main.py count --all
  python main.py toy-gen --out toy_corpus
  python main.py train --toy --variant tenet6-narrow --iters 2000 --out toy.tnet
  python main.py infer --model toy.tnet --in toy_corpus/yes/<clip>.wav
"""

from kws.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
