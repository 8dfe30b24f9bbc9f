"""Beam search, streaming decoding and evaluation over serialized score sources."""

from .core import (NEG_INF, DecodeError, DimensionError, DomainError, Hypothesis, NBestEntry, NBestList,
                   ParseError, PosteriorLattice, SearchSpaceError, StateError, ValidationReport,
                   VocabMismatchError, Vocabulary, load_lattice, save_lattice, validate_lattice)
from .ctc import (CtcPrefixState, EndDetectConfig, ctc_forward, ctc_greedy, ctc_prefix_extend,
                  ctc_prefix_init, end_detect)
from .ensemble import MbrConfig, mbr_rank
from .metrics import BleuReport, LatencyRecord, average_lagging, corpus_al, corpus_bleu
from .scorers import (JointScorer, PrefixScorer, TableJointScorer, TrieScorer, load_joint_scorer,
                      load_trie_scorer, score_joint, score_prefix)
from .search import BeamConfig, label_sync_search, multi_decoder_search, time_sync_search
from .streaming import (HoldN, LocalAgreement, StreamPolicy, StreamSession, detect_boundary, finalize,
                        open_session, process_block, run_stream)
from .transducer import (TransducerConfig, alsd_search, graves_search, transducer_greedy, transducer_search,
                         tsd_search)

__version__ = "0.1.0"
