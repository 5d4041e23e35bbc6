#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "protoclip/data.hpp"
#include "test_util.hpp"

using namespace protoclip;
using protoclip::testing::TempDir;

namespace {

/// One numeric modality with a single column holding `values`.
DatasetTable column_table(const std::vector<double>& values) {
  DatasetTable t;
  t.modalities.push_back({"m", "m_", {"m_x"}, {}, {}});
  t.image_dim = 1;
  for (std::size_t i = 0; i < values.size(); ++i) {
    Sample s;
    s.id = "r" + std::to_string(i);
    s.image = Matrix{{0.0}};
    s.modalities.push_back(RawRow{{values[i]}, {}});
    s.split = Split::train;
    t.samples.push_back(std::move(s));
  }
  return t;
}

std::vector<std::size_t> all_indices(const DatasetTable& t) {
  std::vector<std::size_t> idx(t.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

csv::Table parse_csv(const std::string& text) {
  std::istringstream in(text);
  return csv::read_table(in, "inline");
}

}  // namespace

TEST(LabelEncoding, CanonicalTokens) {
  EXPECT_EQ(encode_label_value("CN"), 0.0);
  EXPECT_EQ(encode_label_value("MCI"), 0.5);
  EXPECT_EQ(encode_label_value("AD"), 1.0);
}

TEST(LabelEncoding, FloatsPassThrough) {
  EXPECT_EQ(encode_label_value("0.75"), 0.75);
  EXPECT_EQ(encode_label_value(0.75), 0.75);
}

TEST(LabelEncoding, CaseAndWhitespaceNormalized) {
  EXPECT_EQ(encode_label_value("cn "), 0.0);
  EXPECT_EQ(encode_label_value(" Mci"), 0.5);
}

TEST(LabelEncoding, Errors) {
  EXPECT_THROW(encode_label_value("EMCI"), ConfigError);
  EXPECT_THROW(encode_label_value("1.5"), ConfigError);
  EXPECT_THROW(encode_label_value(-0.1), ConfigError);
}

TEST(SnapClass, BoundariesGoToLowerSeverity) {
  EXPECT_EQ(snap_class(0.0), DiagnosisClass::CN);
  EXPECT_EQ(snap_class(0.25), DiagnosisClass::CN);
  EXPECT_EQ(snap_class(std::nextafter(0.25, 1.0)), DiagnosisClass::MCI);
  EXPECT_EQ(snap_class(0.5), DiagnosisClass::MCI);
  EXPECT_EQ(snap_class(0.75), DiagnosisClass::MCI);
  EXPECT_EQ(snap_class(std::nextafter(0.75, 1.0)), DiagnosisClass::AD);
  EXPECT_EQ(snap_class(1.0), DiagnosisClass::AD);
}

TEST(SnapClass, TotalOverUnitInterval) {
  for (int i = 0; i <= 1000; ++i) {
    const double y = i / 1000.0;
    const auto c = snap_class(y);
    const double centre = kClassValue[static_cast<int>(c)];
    for (double other : kClassValue) EXPECT_LE(std::abs(y - centre), std::abs(y - other) + 1e-15);
  }
}

TEST(OneHot, Examples) {
  EXPECT_EQ(one_hot("b", {"a", "b", "c"}), (Matrix{{0, 1, 0}}));
  EXPECT_EQ(one_hot("z", {"a", "b", "c"}), (Matrix{{0, 0, 0}}));
  EXPECT_EQ(one_hot("a", {"a"}), (Matrix{{1}}));
}

TEST(FitPreprocess, PopulationStd) {
  const auto t = column_table({1, 2, 3});
  const auto stats = fit_preprocess(t, all_indices(t));
  const ColumnStats& c = stats.modality("m").numeric[0];
  EXPECT_EQ(c.mean, 2.0);
  EXPECT_NEAR(c.std, 0.816496580927726, 1e-15);
  EXPECT_FALSE(c.constant);
}

TEST(FitPreprocess, ConstantColumnFlagged) {
  const auto t = column_table({5, 5});
  const auto stats = fit_preprocess(t, all_indices(t));
  const ColumnStats& c = stats.modality("m").numeric[0];
  EXPECT_EQ(c.mean, 5.0);
  EXPECT_EQ(c.std, 0.0);
  EXPECT_TRUE(c.constant);
  EXPECT_EQ(apply_preprocess(RawRow{{123.0}, {}}, stats.modality("m")), (Matrix{{0.0}}));
}

TEST(FitPreprocess, EmptyTrainingSplit) {
  const auto t = column_table({1, 2});
  EXPECT_THROW(fit_preprocess(t, {}), ConfigError);
}

TEST(FitPreprocess, TestOutlierDoesNotMoveStats) {
  auto t = column_table({1, 2, 3, 4});
  t.samples[3].split = Split::test;
  const auto before = fit_preprocess(t, t.indices(Split::train));
  t.samples[3].modalities[0].numeric[0] = 1e9;
  const auto after = fit_preprocess(t, t.indices(Split::train));
  EXPECT_EQ(before.modality("m").numeric[0].mean, after.modality("m").numeric[0].mean);
  EXPECT_EQ(before.modality("m").numeric[0].std, after.modality("m").numeric[0].std);
}

TEST(ApplyPreprocess, ZScores) {
  const auto t = column_table({1, 2, 3});
  const auto stats = fit_preprocess(t, all_indices(t));
  const Matrix m = modality_matrix(t, stats, 0, all_indices(t));
  EXPECT_NEAR(m[0], -1.224744871391589, 1e-12);
  EXPECT_EQ(m[1], 0.0);
  EXPECT_NEAR(m[2], 1.224744871391589, 1e-12);
}

TEST(ApplyPreprocess, MissingImputesMean) {
  const auto t = column_table({1, 2, 3});
  const auto stats = fit_preprocess(t, all_indices(t));
  EXPECT_EQ(apply_preprocess(RawRow{{std::nan("")}, {}}, stats.modality("m")), (Matrix{{0.0}}));
}

TEST(ApplyPreprocess, SchemaMismatch) {
  const auto t = column_table({1, 2, 3});
  const auto stats = fit_preprocess(t, all_indices(t));
  EXPECT_THROW(apply_preprocess(RawRow{{1.0, 2.0}, {}}, stats.modality("m")), ConfigError);
}

TEST(ApplyPreprocess, CategoricalAppendedAfterNumeric) {
  DatasetTable t;
  t.modalities.push_back({"m", "m_", {"m_x"}, {"m_c"}, {}});
  t.image_dim = 1;
  const std::vector<std::pair<double, std::string>> rows = {{1, "b"}, {3, "a"}, {5, "b"}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Sample s;
    s.id = std::to_string(i);
    s.image = Matrix{{0.0}};
    s.modalities.push_back(RawRow{{rows[i].first}, {rows[i].second}});
    t.samples.push_back(s);
  }
  const auto stats = fit_preprocess(t, all_indices(t));
  const ModalityStats& ms = stats.modality("m");
  EXPECT_EQ(ms.categorical[0].vocabulary, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ms.feature_names(), (std::vector<std::string>{"m_x", "m_c=a", "m_c=b"}));
  const Matrix r = apply_preprocess(RawRow{{3.0}, {"b"}}, ms);
  EXPECT_EQ(r, (Matrix{{0.0, 0.0, 1.0}}));
  EXPECT_EQ(apply_preprocess(RawRow{{3.0}, {"unseen"}}, ms), (Matrix{{0.0, 0.0, 0.0}}));
}

TEST(ApplyPreprocess, TrainColumnsHaveZeroMeanUnitStd) {
  SynthConfig sc;
  sc.n = 300;
  sc.seed = 3;
  const auto ds = synth_generate(sc);
  const auto table = make_splits(ds.table, 3);
  const auto train = table.indices(Split::train);
  const auto stats = fit_preprocess(table, train);
  for (std::size_t m = 0; m < table.modalities.size(); ++m) {
    const Matrix x = modality_matrix(table, stats, m, train);
    const std::size_t numeric = stats.modalities[m].numeric.size();
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) mean += x(r, c);
      mean /= static_cast<double>(x.rows());
      for (std::size_t r = 0; r < x.rows(); ++r) sq += (x(r, c) - mean) * (x(r, c) - mean);
      if (c < numeric) {
        EXPECT_LT(std::abs(mean), 1e-9);
        EXPECT_LT(std::abs(std::sqrt(sq / static_cast<double>(x.rows())) - 1.0), 1e-9);
      }
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = numeric; c < x.cols(); ++c) s += x(r, c);
      EXPECT_TRUE(s == 0.0 || s == 1.0);
    }
  }
}

TEST(MakeSplits, PaperSizedBalancedSplit) {
  SynthConfig sc;
  sc.n = 882;
  sc.seed = 1;
  const auto table = make_splits(synth_generate(sc).table, 1);
  EXPECT_EQ(table.indices(Split::train).size(), 618u);
  EXPECT_EQ(table.indices(Split::val).size(), 132u);
  EXPECT_EQ(table.indices(Split::test).size(), 132u);
  std::size_t counts[3][4] = {};
  for (const auto& s : table.samples) ++counts[static_cast<int>(snap_class(s.label))][static_cast<int>(s.split)];
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(counts[c][static_cast<int>(Split::train)], 206u);
    EXPECT_EQ(counts[c][static_cast<int>(Split::val)], 44u);
    EXPECT_EQ(counts[c][static_cast<int>(Split::test)], 44u);
    EXPECT_EQ(counts[c][static_cast<int>(Split::unassigned)], 0u);
  }
}

TEST(MakeSplits, DeterministicUnderSeed) {
  SynthConfig sc;
  sc.n = 90;
  const auto base = synth_generate(sc).table;
  const auto a = make_splits(base, 5), b = make_splits(base, 5), c = make_splits(base, 6);
  bool differs = false;
  for (std::size_t i = 0; i < base.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].split, b.samples[i].split);
    differs = differs || a.samples[i].split != c.samples[i].split;
  }
  EXPECT_TRUE(differs);
}

TEST(MakeSplits, AllTrain) {
  SynthConfig sc;
  sc.n = 30;
  const auto t = make_splits(synth_generate(sc).table, 1, SplitFractions{1, 0, 0});
  EXPECT_EQ(t.indices(Split::train).size(), 30u);
}

TEST(MakeSplits, Errors) {
  SynthConfig sc;
  sc.n = 30;
  const auto base = synth_generate(sc).table;
  EXPECT_THROW(make_splits(base, 1, SplitFractions{0.5, 0.2, 0.2}), ConfigError);
  sc.n = 4;  // classes of 2, 1, 1 samples
  EXPECT_THROW(make_splits(synth_generate(sc).table, 1), ConfigError);
  EXPECT_NO_THROW(make_splits(synth_generate(sc).table, 1, {}, false));
}

TEST(MakeSplits, RandomTablesStayWithinOneSamplePerStratum) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    SynthConfig sc;
    sc.n = 9 + rng() % 300;
    sc.balanced = trial % 2 == 0;
    sc.seed = rng();
    sc.modalities = {{"a", "a_", 2, 1, false}};
    const auto t = make_splits(synth_generate(sc).table, rng(), {}, sc.balanced);
    // Balanced splits stratify by class; otherwise the whole table is one stratum.
    const int strata = sc.balanced ? 3 : 1;
    std::size_t n[3] = {}, train[3] = {}, val[3] = {}, test[3] = {};
    for (const auto& s : t.samples) {
      const int c = sc.balanced ? static_cast<int>(snap_class(s.label)) : 0;
      ++n[c];
      train[c] += s.split == Split::train;
      val[c] += s.split == Split::val;
      test[c] += s.split == Split::test;
    }
    for (int c = 0; c < strata; ++c) {
      const double expected = 0.15 * static_cast<double>(n[c]);
      EXPECT_LE(std::abs(static_cast<double>(train[c]) - 0.70 * static_cast<double>(n[c])), 1.0) << n[c];
      EXPECT_LE(std::abs(static_cast<double>(val[c]) - expected), 1.0);
      EXPECT_LE(std::abs(static_cast<double>(test[c]) - expected), 1.0);
    }
  }
}

TEST(MakeSplits, EveryStratumSizeWithinOneOfQuota) {
  for (std::size_t n = 1; n <= 200; ++n) {
    const DatasetTable t = make_splits(column_table(std::vector<double>(n, 0.0)), n, {}, false);
    const double got[3] = {static_cast<double>(t.indices(Split::train).size()),
                           static_cast<double>(t.indices(Split::val).size()),
                           static_cast<double>(t.indices(Split::test).size())};
    const double quota[3] = {0.70 * n, 0.15 * n, 0.15 * n};
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(got[k] - quota[k]), 1.0) << "n=" << n << " split " << k;
    EXPECT_EQ(got[0] + got[1] + got[2], static_cast<double>(n));
  }
}

TEST(Synth, NoiselessForcedLatentsSnapExactly) {
  SynthConfig sc;
  sc.n = 3;
  sc.noise = 0.0;
  sc.latent = {0.0, 0.5, 1.0};
  const auto t = synth_generate(sc).table;
  EXPECT_EQ(t.samples[0].label, 0.0);
  EXPECT_EQ(t.samples[1].label, 0.5);
  EXPECT_EQ(t.samples[2].label, 1.0);
}

TEST(Synth, SameSeedBitwiseIdentical) {
  SynthConfig sc;
  sc.n = 50;
  sc.seed = 9;
  std::ostringstream a, b;
  save_dataset(a, synth_generate(sc).table);
  save_dataset(b, synth_generate(sc).table);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Synth, SignalColumnsCorrelateWithLatent) {
  SynthConfig sc;
  sc.n = 500;
  sc.noise = 0.1;
  sc.balanced = false;
  sc.seed = 21;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t i = 0; i < sc.n; ++i) sc.latent.push_back(u(rng));
  const auto ds = synth_generate(sc);
  std::size_t checked = 0;
  for (std::size_t m = 0; m < ds.table.modalities.size(); ++m) {
    const auto& spec = ds.table.modalities[m];
    for (std::size_t c = 0; c < spec.numeric_columns.size(); ++c) {
      const bool signal = std::any_of(ds.mask.begin(), ds.mask.end(), [&](const SignalMaskEntry& e) {
        return e.column == spec.numeric_columns[c] && e.is_signal;
      });
      double mx = 0, mz = 0, sxx = 0, szz = 0, sxz = 0;
      const double n = static_cast<double>(sc.n);
      for (std::size_t i = 0; i < sc.n; ++i) {
        mx += ds.table.samples[i].modalities[m].numeric[c];
        mz += sc.latent[i];
      }
      mx /= n;
      mz /= n;
      for (std::size_t i = 0; i < sc.n; ++i) {
        const double dx = ds.table.samples[i].modalities[m].numeric[c] - mx, dz = sc.latent[i] - mz;
        sxx += dx * dx;
        szz += dz * dz;
        sxz += dx * dz;
      }
      const double r = sxz / std::sqrt(sxx * szz);
      if (signal) {
        EXPECT_GT(std::abs(r), 0.9) << spec.numeric_columns[c];
        ++checked;
      } else {
        EXPECT_LT(std::abs(r), 0.3) << spec.numeric_columns[c];
      }
    }
  }
  EXPECT_EQ(checked, 12u);
}

TEST(Synth, MaskAndErrors) {
  SynthConfig sc;
  sc.n = 10;
  const auto ds = synth_generate(sc);
  std::size_t signal = 0;
  for (const auto& e : ds.mask) signal += e.is_signal;
  EXPECT_EQ(ds.mask.size(), 4u * 13u);
  EXPECT_EQ(signal, 4u * 4u);
  std::ostringstream os;
  write_signal_mask(os, ds.mask);
  EXPECT_EQ(os.str().substr(0, 26), "modality,column,is_signal\n");

  sc.modalities = {{"a", "a_", 3, 4, true}};
  try {
    synth_generate(sc);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
  }
  sc.modalities = {{"a", "a_", 3, 1, true}, {"b", "a_x", 3, 1, true}};
  EXPECT_THROW(synth_generate(sc), ConfigError);
}

TEST(Csv, QuotedFieldsRoundTrip) {
  std::ostringstream os;
  csv::write_record(os, {"plain", "with,comma", "with \"quote\"", "multi\nline"});
  std::istringstream in(os.str());
  csv::Row r;
  ASSERT_TRUE(csv::read_record(in, r));
  EXPECT_EQ(r, (csv::Row{"plain", "with,comma", "with \"quote\"", "multi\nline"}));
}

TEST(Csv, ParseAndFormatDoubles) {
  EXPECT_EQ(csv::parse_double(" 1.5 "), 1.5);
  EXPECT_EQ(csv::parse_double("+2"), 2.0);
  EXPECT_FALSE(csv::parse_double("1.5x"));
  EXPECT_FALSE(csv::parse_double(""));
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345678.9}) EXPECT_EQ(*csv::parse_double(csv::format_double(v)), v);
}

TEST(Csv, RaggedRecordRejected) {
  EXPECT_THROW(parse_csv("a,b\n1,2\n3\n"), FormatError);
  EXPECT_THROW(parse_csv(""), FormatError);
}

TEST(LoadDataset, InlineImagesAndPrefixes) {
  const auto t = load_dataset(parse_csv("\xEF\xBB\xBFsample_id,label,img_0,img_1,bio_a,bio_b,cog_x,other\n"
                                        "p1,CN,0.1,0.2,1,lo,3,zzz\n"
                                        "p2,0.75,0.3,0.4,,hi,4,zzz\n"),
                              {{"biomarkers", "bio_", {}}, {"cognitive", "cog_", {}}});
  ASSERT_EQ(t.samples.size(), 2u);
  EXPECT_EQ(t.image_dim, 2u);
  EXPECT_EQ(t.samples[1].label, 0.75);
  EXPECT_EQ(t.modalities[0].numeric_columns, (std::vector<std::string>{"bio_a"}));
  EXPECT_EQ(t.modalities[0].categorical_columns, (std::vector<std::string>{"bio_b"}));
  EXPECT_TRUE(std::isnan(t.samples[1].modalities[0].numeric[0]));
  EXPECT_EQ(t.samples[1].modalities[0].categorical[0], "hi");
}

TEST(LoadDataset, ImagePathFiles) {
  TempDir dir("images");
  const float pixels[3] = {1.5f, -2.0f, 0.25f};
  {
    std::ofstream f(dir.path() / "a.f32", std::ios::binary);
    for (float p : pixels) {
      std::uint32_t u;
      std::memcpy(&u, &p, 4);
      for (int b = 0; b < 4; ++b) f.put(static_cast<char>((u >> (8 * b)) & 0xFF));
    }
  }
  {
    std::ofstream f(dir.path() / "data.csv");
    f << "sample_id,label,image_path,bio_a\nx,AD,a.f32,1\n";
  }
  const auto t = load_dataset_file(dir.str("data.csv"), {{"biomarkers", "bio_", {}}});
  EXPECT_EQ(t.samples[0].image, (Matrix{{1.5, -2.0, 0.25}}));
  {
    std::ofstream f(dir.path() / "bad.f32", std::ios::binary);
    f << "abc";
  }
  {
    std::ofstream f(dir.path() / "bad.csv");
    f << "sample_id,label,image_path,bio_a\nx,AD,bad.f32,1\n";
  }
  EXPECT_THROW(load_dataset_file(dir.str("bad.csv"), {{"biomarkers", "bio_", {}}}), FormatError);
}

TEST(LoadDataset, SchemaErrors) {
  const std::vector<ModalityDef> defs{{"biomarkers", "bio_", {}}};
  EXPECT_THROW(load_dataset(parse_csv("label,img_0,bio_a\nCN,1,1\n"), defs), ConfigError);
  EXPECT_THROW(load_dataset(parse_csv("sample_id,img_0,bio_a\np,1,1\n"), defs), ConfigError);
  EXPECT_THROW(load_dataset(parse_csv("sample_id,label,bio_a\np,CN,1\n"), defs), ConfigError);
  EXPECT_THROW(load_dataset(parse_csv("sample_id,label,img_0,bio_a\np,CN,1,1\np,AD,1,1\n"), defs), ConfigError);
  EXPECT_THROW(load_dataset(parse_csv("sample_id,label,img_0,bio_a\np,XX,1,1\n"), defs), ConfigError);
  EXPECT_THROW(load_dataset(parse_csv("sample_id,label,img_0,cog_a\np,CN,1,1\n"), defs), ConfigError);
  // A column claimed by two modalities.
  EXPECT_THROW(load_dataset(parse_csv("sample_id,label,img_0,bio_a\np,CN,1,1\n"),
                            {{"biomarkers", "bio_", {}}, {"b2", "bio", {}}}),
               ConfigError);
  // Declared categorical column missing from the header.
  EXPECT_THROW(load_dataset(parse_csv("sample_id,label,img_0,bio_a\np,CN,1,1\n"),
                            {{"biomarkers", "bio_", {{"bio_z", {}}}}}),
               ConfigError);
}

TEST(LoadDataset, OptionalLabelForInference) {
  const auto t = load_dataset(parse_csv("sample_id,img_0,bio_a\np,1,1\n"), {{"biomarkers", "bio_", {}}}, {},
                              LoadOptions{false, true});
  EXPECT_EQ(t.samples.size(), 1u);
}

TEST(LoadDataset, SaveLoadIsIdempotent) {
  SynthConfig sc;
  sc.n = 40;
  sc.seed = 4;
  const auto original = synth_generate(sc).table;
  std::ostringstream first;
  save_dataset(first, original);
  const auto loaded = load_dataset(parse_csv(first.str()), modality_defs(original));
  std::ostringstream second;
  save_dataset(second, loaded);
  EXPECT_EQ(first.str(), second.str());
  ASSERT_EQ(loaded.samples.size(), original.samples.size());
  for (std::size_t i = 0; i < loaded.samples.size(); ++i) {
    EXPECT_EQ(loaded.samples[i].id, original.samples[i].id);
    EXPECT_EQ(loaded.samples[i].label, original.samples[i].label);
    EXPECT_EQ(loaded.samples[i].image, original.samples[i].image);
    for (std::size_t m = 0; m < loaded.modalities.size(); ++m) {
      EXPECT_EQ(loaded.samples[i].modalities[m].numeric, original.samples[i].modalities[m].numeric);
      EXPECT_EQ(loaded.samples[i].modalities[m].categorical, original.samples[i].modalities[m].categorical);
    }
  }
  const auto reloaded = load_dataset(parse_csv(second.str()), modality_defs(loaded));
  EXPECT_EQ(reloaded.modalities[0].vocabularies, original.modalities[0].vocabularies);
}
