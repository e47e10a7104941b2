# NP-FKGC Command Line Entry
# Few-shot knowledge graph completion: synth, train, eval, sweep, study, inspect-checkpoint
#
#   python app.py synth --output-dir data/synth
#   python app.py train --triples data/synth/triples.tsv --split data/synth/split.json \
#       --embeddings data/synth/embeddings.txt --d 32 --d-z 32 --H 32 --output-dir runs/demo

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
