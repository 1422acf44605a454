import csv
import json

import numpy as np
import pytest
import torch

from hique.evaluation import (
    MODALITY_SETTINGS,
    ABLATION_COLUMNS,
    COMPONENT_SETTINGS,
    AblationSetting,
    apply_question_embedding,
    attention_report,
    collapse_to_single_segment,
    plot_attention,
    received_mass,
    run_ablation,
    write_ablation_csv,
)
from hique.features import MODALITIES, EmbeddedInterview, ModalityFeatures, SyntheticConfig, generate_synthetic_corpus
from hique.model import HiQuE, ModelConfig
from hique.structuring import HierarchicalPosition, Label
from hique.taxonomy import Role
from hique.training import TrainConfig, split_dataset


def test_setting_presets():
    assert len(COMPONENT_SETTINGS) == 7 and len(MODALITY_SETTINGS) == 7
    assert [s.name for s in MODALITY_SETTINGS] == ["A", "V", "T", "A+V", "V+T", "A+T", "A+V+T"]
    with pytest.raises(ValueError):
        AblationSetting(modalities=())
    with pytest.raises(ValueError):
        AblationSetting(question_embedding="deep")
    s = AblationSetting.from_dict({"modalities": ["text", "audio"], "cm_attention": False})
    assert s.modalities == ("audio", "text") and s.name == "hierarchical/A+T/noCM"


def test_question_embedding_variants(small_corpus):
    iv = small_corpus[0]
    single = collapse_to_single_segment(iv)
    assert single.slot_mask.sum() == 1 and single.slot_mask[0]
    np.testing.assert_allclose(single.audio.matrix[0], iv.audio.matrix[iv.audio.mask].mean(0), rtol=1e-6)
    flat = apply_question_embedding([iv], "flat")[0]
    assert flat.hierarchy == [] and flat.audio is iv.audio
    assert apply_question_embedding([iv], "hierarchical")[0] is iv


def test_received_mass_uniform_and_normalized():
    uniform = torch.full((2, 3, 85, 85), 1 / 85)
    np.testing.assert_allclose(received_mass(uniform), 1 / 85, atol=1e-12)
    raw = torch.softmax(torch.randn(4, 2, 85, 85), dim=-1)
    np.testing.assert_allclose(received_mass(raw).sum(axis=1), 1.0, atol=1e-6)


def _single_slot_interview():
    feats = []
    for m in MODALITIES:
        d = {"audio": 88, "visual": 272, "text": 768}[m]
        mat, mask = np.zeros((85, d)), np.zeros(85, bool)
        mat[2], mask[2] = 1.0, True
        feats.append(ModalityFeatures(m, mat, mask))
    return EmbeddedInterview("solo", *feats, hierarchy=[HierarchicalPosition(3, Role.PRIMARY, 3, 0)],
                             label=Label.NORMAL)


def test_attention_report_drill_down(taxonomy, tmp_path):
    model = HiQuE(ModelConfig()).eval()
    report = attention_report(model, [_single_slot_interview()], taxonomy)
    slots = report.interviews[0]["slots"]
    assert len(slots) == 1 and slots[0]["slot"] == 3
    assert slots[0]["text"] == "where are you from originally"
    assert slots[0]["role"] == "primary"
    for mass in report.self_mass.values():
        assert len(mass) == 85 and np.mean(mass) == pytest.approx(1 / 85)
    assert set(report.cross_mass) == {"audio->visual", "visual->audio", "visual->text", "text->visual",
                                      "text->audio", "audio->text"}
    report.save(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["n_slots"] == 85
    paths = plot_attention(report, tmp_path / "plots")
    assert len(paths) == 9 and all(p.exists() for p in paths)


def test_ablation_table_shape_and_failures(tmp_path):
    corpus = generate_synthetic_corpus(SyntheticConfig(n_depressed=6, n_normal=6, seed=0))
    split = split_dataset(corpus, seed=0, sizes=(2, 1, 1))
    settings = list(COMPONENT_SETTINGS[:2]) + [MODALITY_SETTINGS[2]]
    rows = run_ablation(settings, split, ModelConfig(), TrainConfig(epochs=1))
    assert [r.error for r in rows] == [None, None, None]
    # an impossible config fails its row without stopping the sweep
    broken = run_ablation([AblationSetting(name="bad"), AblationSetting(name="ok")], split,
                          ModelConfig(input_dims={"audio": 5}), TrainConfig(epochs=1))
    assert broken[0].error and broken[1].error  # both rows use the broken config
    write_ablation_csv(rows + broken, tmp_path / "t.csv")
    with open(tmp_path / "t.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 5
    assert list(table[0])[: len(ABLATION_COLUMNS)] == ABLATION_COLUMNS
    assert table[0]["QE"] == "0" and table[0]["HQE"] == "0"
    assert table[1]["QE"] == "1" and table[1]["HQE"] == "0"
    assert table[2]["Modalities"] == "T"
    assert table[3]["F1"] == "" and "DataValidationError" in table[3]["Error"]


def test_ablation_repeatable():
    corpus = generate_synthetic_corpus(SyntheticConfig(n_depressed=6, n_normal=6, seed=0))
    split = split_dataset(corpus, seed=0, sizes=(2, 1, 1))
    settings = [COMPONENT_SETTINGS[-1], COMPONENT_SETTINGS[3]]
    a = run_ablation(settings, split, ModelConfig(), TrainConfig(epochs=2))
    b = run_ablation(settings, split, ModelConfig(), TrainConfig(epochs=2))
    assert [r.csv_row() for r in a] == [r.csv_row() for r in b]
