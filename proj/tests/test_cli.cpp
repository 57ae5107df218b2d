#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "criteria.hpp"
#include "egr/cli.hpp"

using namespace egr;
using namespace egr::test;
namespace fs = std::filesystem;

namespace {

class Workspace : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("egr_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string put(const std::string& name, const std::string& text) const {
    fs::create_directories((dir_ / name).parent_path());
    std::ofstream(path(name), std::ios::binary) << text;
    return path(name);
  }

  std::string put_pdb(const std::string& name, const ComplexStructure& s) const { return put(name, write_pdb(s)); }

  std::string put_weights(const std::string& name, const EgrParams& p, const EgrConfig& c) const {
    return put(name, save_weights(p, c));
  }

  static std::string read(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "egr");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    err_.str("");
    return cli::run(static_cast<int>(argv.size()), argv.data(), err_);
  }

  fs::path dir_;
  std::ostringstream err_;
};

// PDB round trip rounds to 3 decimals; compare structures at that precision.
ComplexStructure pdb_rounded(const ComplexStructure& s) { return parse_pdb(write_pdb(s)); }

}  // namespace

// ---------------------------------------------------------------------------
// refine

class Refine : public Workspace {};

TEST_F(Refine, FreshWeightsReproduceInputExactly) {
  std::mt19937_64 rng(71);
  const auto s = pdb_rounded(jittered(helix_dimer(6, 5), 0.3, rng));
  const EgrConfig c = small_config(2, 8);
  const auto in = put_pdb("in.pdb", s);
  ASSERT_EQ(cli({"refine", "--input", in, "--weights", put_weights("w.egrw", init_params(c, 0), c), "--output",
                 path("out.pdb"), "--report", path("r.json")}),
            0)
      << err_.str();
  EXPECT_EQ(read(path("out.pdb")), read(in));
}

TEST_F(Refine, RotatedInputGivesRotatedRefinement) {
  std::mt19937_64 rng(72);
  const EgrConfig c = small_config(2, 8, 128);
  const auto w = put_weights("w.egrw", random_params(c, 73, 0.2), c);
  const auto s = pdb_rounded(jittered(helix_dimer(6, 5), 0.3, rng));
  const Eigen::Matrix3d u = random_rotation(rng);
  const Eigen::Vector3d b = random_vector(rng, 10.0);
  const auto moved = transformed(s, u, b);
  ASSERT_EQ(cli({"refine", "--input", put_pdb("a.pdb", s), "--weights", w, "--output", path("a_out.pdb"), "--report",
                 path("a.json")}),
            0);
  // Refine the unrounded moved structure in-process so only one PDB rounding enters.
  const auto ref = parse_pdb(read(path("a_out.pdb")));
  const auto direct = forward(build_knn_graph(moved, Granularity::AllAtom), random_params(c, 73, 0.2), c);
  EXPECT_LT((direct.refined_coords - transform(ref.coords(), u, b)).cwiseAbs().maxCoeff(), 2e-3);
  ASSERT_EQ(cli({"refine", "--input", put_pdb("b.pdb", moved), "--weights", w, "--output", path("b_out.pdb"),
                 "--report", path("b.json")}),
            0);
  const auto out_b = parse_pdb(read(path("b_out.pdb")));
  EXPECT_LT((out_b.coords() - transform(ref.coords(), u, b)).cwiseAbs().maxCoeff(), 0.05);
}

TEST_F(Refine, ReportHasPerResidueLddtInUnitInterval) {
  const EgrConfig c = small_config(2, 8);
  ASSERT_EQ(cli({"refine", "--input", put_pdb("in.pdb", helix_dimer(4, 3)), "--weights",
                 put_weights("w.egrw", random_params(c, 74), c), "--output", path("o.pdb"), "--report",
                 path("r.json"), "--iterations", "2"}),
            0);
  const auto j = nlohmann::json::parse(read(path("r.json")));
  EXPECT_EQ(j["schema_version"], 1);
  EXPECT_EQ(j["iterations"], 2);
  ASSERT_EQ(j["per_residue"].size(), 7u);
  const double mean = j["mean_predicted_lddt_ca"];
  EXPECT_GE(mean, 0.0);
  EXPECT_LE(mean, 1.0);
  double sum = 0.0;
  for (const auto& r : j["per_residue"]) sum += r["predicted_lddt_ca"].get<double>();
  EXPECT_NEAR(sum / 7.0, mean, 1e-12);
}

TEST_F(Refine, CalphaWeightsRefineCalphaTrace) {
  EgrConfig c = small_config(1, 8);
  c.granularity = Granularity::CAlpha;
  ASSERT_EQ(cli({"refine", "--input", put_pdb("in.pdb", helix_dimer(4, 3)), "--weights",
                 put_weights("w.egrw", init_params(c, 0), c), "--output", path("o.pdb"), "--report", path("r.json")}),
            0)
      << err_.str();
  const auto out = parse_pdb(read(path("o.pdb")));
  EXPECT_EQ(out.coords().cols(), 7);
}

TEST_F(Refine, ParseErrorExitsTwo) {
  const EgrConfig c = small_config(1, 4);
  EXPECT_EQ(cli({"refine", "--input", put("bad.pdb", "ATOM      1  CA  ALA A   1    garbage\n"), "--weights",
                 put_weights("w.egrw", init_params(c, 0), c), "--output", path("o.pdb"), "--report", path("r.json")}),
            2);
  EXPECT_FALSE(err_.str().empty());
}

TEST_F(Refine, WeightsMismatchExitsThree) {
  EgrConfig c = small_config(1, 4);
  c.features.surface_proximity = false;
  auto p = init_params(c, 0);
  // Weights claim the default feature widths but carry NSP-shaped embedding: shape error.
  std::string bytes = save_weights(p, small_config(1, 4));
  EXPECT_THROW(load_weights(bytes), WeightsShapeError);
  const auto in = put_pdb("in.pdb", helix_dimer(3, 2));
  EXPECT_EQ(cli({"refine", "--input", in, "--weights", put("w.egrw", bytes), "--output", path("o.pdb"), "--report",
                 path("r.json")}),
            3);
  EXPECT_EQ(cli({"refine", "--input", in, "--weights", put("junk.egrw", "not weights"), "--output", path("o.pdb"),
                 "--report", path("r.json")}),
            3);
}

// ---------------------------------------------------------------------------
// score

class Score : public Workspace {};

TEST_F(Score, NativeAgainstItselfIsPerfect) {
  const auto n = put_pdb("n.pdb", helix_dimer());
  ASSERT_EQ(cli({"score", "--decoy", n, "--native", n, "--report", path("r.json")}), 0) << err_.str();
  const auto j = nlohmann::json::parse(read(path("r.json")));
  EXPECT_NEAR(j["dockq"].get<double>(), 1.0, 1e-12);
  EXPECT_EQ(j["class"], "high");
  EXPECT_EQ(j["lddt_ca"], 1.0);
  EXPECT_EQ(j["schema_version"], 1);
}

TEST_F(Score, DistantLigandIsIncorrect) {
  auto decoy = helix_dimer();
  for (auto& r : decoy.chains[1].residues)
    for (auto& a : r.atoms) a.coord.x() += 100.0;
  ASSERT_EQ(cli({"score", "--decoy", put_pdb("d.pdb", decoy), "--native", put_pdb("n.pdb", helix_dimer()), "--report",
                 path("r.json")}),
            0);
  const auto j = nlohmann::json::parse(read(path("r.json")));
  EXPECT_EQ(j["fnat"], 0.0);
  EXPECT_EQ(j["class"], "incorrect");
}

TEST_F(Score, ReportEqualsLibraryCalls) {
  std::mt19937_64 rng(75);
  const auto native = pdb_rounded(helix_dimer());
  const auto decoy = pdb_rounded(jittered(native, 1.0, rng));
  ASSERT_EQ(cli({"score", "--decoy", put_pdb("d.pdb", decoy), "--native", put_pdb("n.pdb", native), "--report",
                 path("r.json")}),
            0);
  const auto j = nlohmann::json::parse(read(path("r.json")));
  const auto lib = score_complex(decoy, native);
  EXPECT_EQ(j["fnat"].get<double>(), lib.fnat);
  EXPECT_EQ(j["fnonnat"].get<double>(), lib.fnonnat);
  EXPECT_EQ(j["irmsd"].get<double>(), lib.irmsd);
  EXPECT_EQ(j["lrmsd"].get<double>(), lib.lrmsd);
  EXPECT_EQ(j["dockq"].get<double>(), lib.dockq);
  EXPECT_EQ(j["lddt_ca"].get<double>(), lib.lddt_ca_global);
  EXPECT_EQ(j["dockq"].get<double>(),
            dockq(j["fnat"].get<double>(), j["lrmsd"].get<double>(), j["irmsd"].get<double>()));
  EXPECT_EQ(j["per_residue_lddt_ca"].size(), lib.per_residue_lddt.size());
}

TEST_F(Score, NoOverlapExitsFourAndSingleChainExitsFive) {
  auto other = helix_dimer();
  for (auto& c : other.chains) c.chain_id = c.chain_id == "A" ? "X" : "Y";
  for (auto& c : other.chains)
    for (auto& r : c.residues)
      for (auto& a : r.atoms) a.chain_id = c.chain_id;
  const auto n = put_pdb("n.pdb", helix_dimer());
  EXPECT_EQ(cli({"score", "--decoy", put_pdb("x.pdb", other), "--native", n, "--report", path("r.json")}), 4);
  ComplexStructure mono;
  mono.chains.push_back(helix_chain("A", 5, Eigen::Vector3d::Zero()));
  const auto m = put_pdb("m.pdb", mono);
  EXPECT_EQ(cli({"score", "--decoy", m, "--native", m, "--report", path("r.json")}), 5);
  EXPECT_EQ(cli({"score", "--decoy", path("missing.pdb"), "--native", n, "--report", path("r.json")}), 6);
}

// ---------------------------------------------------------------------------
// evaluate

class Evaluate : public Workspace {};

TEST_F(Evaluate, PerfectRankingCountsTopTenClasses) {
  std::mt19937_64 rng(76);
  const auto native = pdb_rounded(helix_dimer());
  put_pdb("natives/T1.pdb", native);
  std::string csv = "target,decoy,predicted_score\n";
  std::vector<DecoyScore> truth;
  for (int k = 0; k < 12; ++k) {
    const double sigma = 0.1 + 0.45 * k;
    const auto d = pdb_rounded(jittered(native, sigma, rng));
    const std::string id = "d" + std::to_string(k);
    put_pdb("decoys/T1/" + id + ".pdb", d);
    truth.push_back({id, 0.0, score_complex(d, native).dockq});
  }
  std::sort(truth.begin(), truth.end(), [](const auto& a, const auto& b) { return a.true_dockq > b.true_dockq; });
  HitTriple expect;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    csv += "T1," + truth[k].decoy_id + "," + std::to_string(1.0 - 0.01 * static_cast<double>(k)) + "\n";
    if (k >= 10) continue;
    const auto q = quality_class(truth[k].true_dockq);
    expect.acceptable += q >= QualityClass::Acceptable;
    expect.medium += q >= QualityClass::Medium;
    expect.high += q == QualityClass::High;
  }
  ASSERT_EQ(cli({"evaluate", "--scores", put("s.csv", csv), "--natives", path("natives"), "--decoys", path("decoys"),
                 "--summary", path("sum.csv"), "--reports", path("q.csv"), "--workers", "2"}),
            0)
      << err_.str();
  const std::string loss = [&] {
    char b[16];
    std::snprintf(b, sizeof b, "%.4f", 1.0 - truth[0].true_dockq);
    return std::string(b);
  }();
  const std::string summary = read(path("sum.csv"));
  EXPECT_NE(summary.find("T1," + to_string(expect) + "," + loss + "\n"), std::string::npos) << summary;
  EXPECT_NE(summary.find("Summary,"), std::string::npos);
  std::istringstream q(read(path("q.csv")));
  std::string header;
  std::getline(q, header);
  EXPECT_EQ(header, "target,decoy,fnat,fnonnat,irmsd,lrmsd,dockq,lddt,class");
}

TEST_F(Evaluate, TwoTargetSummaryFormat) {
  // Both top decoys are the natives themselves: losses 0 and 0.
  const auto native = helix_dimer();
  for (const char* t : {"A1", "B2"}) {
    put_pdb(std::string("natives/") + t + ".pdb", native);
    put_pdb(std::string("decoys/") + t + "/top.pdb", native);
  }
  ASSERT_EQ(cli({"evaluate", "--scores", put("s.csv", "target,decoy,predicted_score\nB2,top,0.9\nA1,top,0.8\n"),
                 "--natives", path("natives"), "--decoys", path("decoys"), "--summary", path("sum.csv")}),
            0);
  EXPECT_EQ(read(path("sum.csv")),
            "target,hits,ranking_loss\nA1,1/1/1,0.0000\nB2,1/1/1,0.0000\nSummary,2/2/2,0.0000 \xC2\xB1 0.0000\n");
  EXPECT_EQ(to_string(mean_std({0.2, 0.4})), "0.3000 \xC2\xB1 0.1414");
}

TEST_F(Evaluate, EmptyCsvAndMissingFilesExitSix) {
  EXPECT_EQ(cli({"evaluate", "--scores", put("s.csv", "target,decoy,predicted_score\n"), "--natives", path("n"),
                 "--decoys", path("d"), "--summary", path("sum.csv")}),
            6);
  EXPECT_NE(err_.str().find("no targets"), std::string::npos);
  put_pdb("natives/T.pdb", helix_dimer());
  EXPECT_EQ(cli({"evaluate", "--scores", put("t.csv", "target,decoy,predicted_score\nT,gone,0.5\n"), "--natives",
                 path("natives"), "--decoys", path("decoys"), "--summary", path("sum.csv")}),
            6);
  EXPECT_NE(err_.str().find("gone"), std::string::npos);
}

TEST_F(Evaluate, MalformedCsvExitsTwo) {
  EXPECT_EQ(cli({"evaluate", "--scores", put("s.csv", "target,decoy,predicted_score\nT,d\n"), "--natives",
                 path("n"), "--decoys", path("d"), "--summary", path("sum.csv")}),
            2);
}

// ---------------------------------------------------------------------------
// train and init

class TrainCli : public Workspace {
 protected:
  void make_data(int count = 3) {
    std::mt19937_64 rng(77);
    for (int i = 0; i < count; ++i) {
      const auto native = helix_dimer(4 + i, 3 + i % 2, 8.5 + 0.3 * i);
      put_pdb("train/ex" + std::to_string(i) + "_native.pdb", native);
      put_pdb("train/ex" + std::to_string(i) + "_decoy.pdb", jittered(native, 0.5, rng));
    }
  }
  int train(const std::string& config_json, const std::string& out = "w.egrw") {
    return cli({"train", "--config", put("cfg.json", config_json), "--train-dir", path("train"), "--out-weights",
                path(out)});
  }
};

TEST_F(TrainCli, ToyTrioLowersRmsd) {
  make_data();
  const std::string cfg =
      R"({"num_layers": 2, "hidden_dim": 16, "window_size": 64, "learning_rate": 0.003, "max_epochs": 60,
          "patience": 60, "no_positional_corruption": true, "seed": 1})";
  ASSERT_EQ(train(cfg), 0) << err_.str();
  const auto [p, c] = load_weights(read(path("w.egrw")));
  const auto data = cli::load_dataset(path("train"), c);
  ASSERT_EQ(data.size(), 3u);
  EXPECT_LT(validation_rmsd(data, p, c), validation_rmsd(data, init_params(c, 1), c));
  std::istringstream log(read(path("w.egrw.log")));
  int lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  EXPECT_GE(lines, 1);
}

TEST_F(TrainCli, FixedSeedGivesIdenticalWeights) {
  make_data(2);
  const std::string cfg = R"({"num_layers": 1, "hidden_dim": 6, "max_epochs": 3, "seed": 9})";
  ASSERT_EQ(train(cfg, "a.egrw"), 0);
  ASSERT_EQ(train(cfg, "b.egrw"), 0);
  EXPECT_EQ(read(path("a.egrw")), read(path("b.egrw")));
  EXPECT_EQ(read(path("a.egrw.log")), read(path("b.egrw.log")));
}

TEST_F(TrainCli, NpcFlagLogsZeroSigma) {
  make_data(1);
  ASSERT_EQ(train(R"({"num_layers": 1, "hidden_dim": 4, "max_epochs": 2, "no_positional_corruption": true})"), 0);
  std::istringstream log(read(path("w.egrw.log")));
  for (std::string l; std::getline(log, l);) EXPECT_EQ(nlohmann::json::parse(l)["noise_sigma"], 0.0);
}

TEST_F(TrainCli, UnknownKeyExitsOneAndEmptyDatasetExitsEight) {
  make_data(1);
  EXPECT_EQ(train(R"({"no_surface_proximty": true})"), 1);
  EXPECT_NE(err_.str().find("no_surface_proximty"), std::string::npos);
  fs::create_directories(path("empty"));
  EXPECT_EQ(cli({"train", "--config", put("c.json", "{}"), "--train-dir", path("empty"), "--out-weights",
                 path("w.egrw")}),
            8);
}

TEST_F(TrainCli, AblationFlagsShrinkFeatureWidths) {
  const auto run = cli::parse_run_config(nlohmann::json::parse(
      R"({"no_surface_proximity": true, "no_relative_geometric_features": true, "no_positional_corruption": true})"));
  EXPECT_EQ(run.train.model.node_dim(), 38);
  EXPECT_EQ(run.train.model.edge_dim(), 3);
  EXPECT_EQ(run.train.effective_sigma(), 0.0);
  const auto ca = cli::parse_run_config(nlohmann::json::parse(R"({"granularity": "c-alpha",
      "no_relative_geometric_features": true})"));
  EXPECT_EQ(ca.train.model.edge_dim(), 2);
  EXPECT_EQ(ca.train.model.node_dim(), 28);
}

TEST_F(TrainCli, InitWritesLoadableWeights) {
  ASSERT_EQ(cli({"init", "--config", put("c.json", R"({"num_layers": 2, "hidden_dim": 8, "seed": 4})"),
                 "--out-weights", path("w.egrw")}),
            0);
  const auto [p, c] = load_weights(read(path("w.egrw")));
  EXPECT_EQ(c.num_layers, 2);
  EXPECT_EQ(p, init_params(c, 4));
}

TEST_F(TrainCli, UsageErrorsExitOne) {
  EXPECT_EQ(cli({}), 1);
  EXPECT_EQ(cli({"refine", "--input", "x.pdb"}), 1);
  EXPECT_EQ(cli({"frobnicate"}), 1);
}
