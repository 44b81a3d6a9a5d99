"""
Evaluation: SIM, CER, RTF and embedding export
==============================================
"""

# %%
import tempfile, pathlib
import torch
from sdtts.config import preset
from sdtts.data import SyntheticVoices, make_synthetic_corpus
from sdtts.evaluation import (
    SyntheticTranscriber, centroid_distance, cer, eval_cer, eval_sim, export_embeddings, measure_rtf,
)
from sdtts.model import ZeroShotTTS
from sdtts.speaker import StubEmbedder

print(cer("kitten", "sitting"))  # 3 edits / 6

# %%
cfg = preset("toy").model
torch.manual_seed(0)
model = ZeroShotTTS(cfg).eval()  # untrained, so the numbers are a floor
held = list(make_synthetic_corpus(2, 2, seed=0, first_speaker=100))
texts = [u.phonemes.ids for u in make_synthetic_corpus(1, 3, seed=0)]

# a separately seeded embedder for scoring, and a transcriber that decodes
# phonemes from the corpus' known content subspace
scorer = StubEmbedder(cfg.n_mels, cfg.d_raw, seed=999)
reader = SyntheticTranscriber(SyntheticVoices(cfg.n_mels, cfg.vocab_size, 0))
print("SIM", eval_sim(model, held, texts, scorer))
print("CER", eval_cer(model, texts, held, reader))
print("RTF", measure_rtf(model, [(texts[0], held[0])]).rtf)

# %%
out = pathlib.Path(tempfile.mkdtemp()) / "emb.txt"
rows = export_embeddings(model, held, scorer, out, texts=texts)
print(out.read_text().splitlines()[0])
print("centroid distance", centroid_distance(rows))
