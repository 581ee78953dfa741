// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "cxrdiff/encoder_bench.hpp"
#include "cxrdiff/eval.hpp"
#include "cxrdiff/finetune.hpp"
#include "cxrdiff/metrics.hpp"
#include "cxrdiff/projection.hpp"
#include "support.hpp"

using namespace cxrdiff;
namespace ct = cxrdiff::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      detail << "FAILED " << what << "; ";
      pass = false;
    }
  }
};

int failures = 0;

void criterion(const char* id, const char* title, double limit_seconds, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.require(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_seconds > 0 && secs >= limit_seconds) {
    std::ostringstream s;
    s << "runtime " << secs << " s >= " << limit_seconds << " s";
    o.require(false, s.str());
  }
  if (!o.pass) ++failures;
  std::printf("[%s] %s %s (%.2f s) %s\n", o.pass ? "PASS" : "FAIL", id, title, secs, o.detail.str().c_str());
  std::fflush(stdout);
}

bool same_scores(const RetrievalScores& a, const RetrievalScores& b) {
  return a.global == b.global && a.per_report == b.per_report;
}

// ---------------------------------------------------------------------------
// Desk-scale run shared by the last two criteria.

struct DeskRun {
  double auc = 0;
  LossHalving halving, instance_halving;
  ClassificationReport report;
  std::vector<ct::ParameterSnapshot> params;
  double seconds = 0;
};

DeskRun desk_run(const fs::path& out_dir, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  ToyBundleConfig bc;
  bc.seed = seed;
  auto b = build_toy_bundle(bc);
  const auto data = make_synthetic_finetune_set(derive_seed(seed, 11));

  SamplerSettings sampler;
  FinetuneConfig cfg;
  cfg.strategy = FinetuneStrategy::unet_with_prior;
  cfg.steps = 400;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.seed = derive_seed(seed, 3);
  cfg.prior_weight = 1.0;
  cfg.prior_set = generate_prior_set(b, "a chest radiograph", 2 * data.size(), derive_seed(seed, 5), sampler);
  const auto run = train_unet(b, data, cfg);

  const auto clf = ToyEffusionClassifier::fit(7);
  auto spec = effusion_generation_spec(derive_seed(seed, 9), 50);
  spec.sampler = sampler;
  const auto generated = generate_suite(b, spec);
  DeskRun r;
  r.report = evaluate_generated(generated, clf);
  r.auc = *r.report.auc;
  r.halving = loss_halving(run.loss_trace);
  r.instance_halving = loss_halving(run.instance_trace);
  r.params.push_back(ct::snapshot(b.parameter_blocks()));

  json metrics = to_json(Table4Row{"U-Net, with prior", r.report});
  metrics["loss_head"] = r.halving.head;
  metrics["loss_tail"] = r.halving.tail;
  metrics["provenance"] = run.provenance;
  ArtifactSet art;
  save_bundle(art, out_dir / "bundle", b);
  art.add_json(out_dir / "metrics.json", metrics);
  art.add(out_dir / "loss.csv", loss_trace_csv(run));
  art.commit();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

int main() {
  criterion("AC1", "Table 4 arithmetic", 1.0, [](Outcome& o) {
    std::vector<double> scores;
    std::vector<int> truth;
    auto add = [&](int n, double s, int y) {
      for (int i = 0; i < n; ++i) scores.push_back(s), truth.push_back(y);
    };
    add(45, 0.9, 1);  // tp
    add(5, 0.2, 1);   // fn
    add(50, 0.1, 0);  // tn
    const auto r = classification_report(scores, truth);
    o.require(r.confusion.tp == 45 && r.confusion.fp == 0 && r.confusion.fn == 5 && r.confusion.tn == 50, "confusion");
    o.require(std::abs(r.precision - 1.000) <= 5e-4, "precision");
    o.require(std::abs(r.recall - 0.900) <= 5e-4, "recall");
    o.require(std::abs(r.f1 - 0.947) <= 5e-4, "f1");
    o.require(std::abs(r.f1 - 90.0 / 95.0) <= 1e-15, "f1 vs 2tp/(2tp+fp+fn)");
    o.require(r.accuracy == 0.95, "accuracy exact");
    o.detail << "P " << r.precision << " R " << r.recall << " F1 " << r.f1 << " acc " << r.accuracy;
  });

  criterion("AC2", "CheXpert@k matches brute force", 10.0, [](Outcome& o) {
    Rng rng(2002);
    int matched = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const int n = 2 + static_cast<int>(rng.index(49));
      const int d = 1 + static_cast<int>(rng.index(8));
      const int k = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(std::min(10, n - 1))));
      const int classes = 1 + static_cast<int>(rng.index(5));
      Eigen::MatrixXd e(n, d);
      for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<double>(rng.index(5)) - 2.0;
      std::vector<int> lab;
      for (int i = 0; i < n; ++i) lab.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(classes))));
      const auto got = chexpert_per_class(e, lab, k);
      const auto raw = chexpert_at_k(e, lab, k);
      const auto ref = ct::brute_force_chexpert(e, lab, k);
      matched += got.global == ref.global && got.per_class == ref.per_class && got.macro == ref.macro &&
                 raw.per_report == ref.per_report;
    }
    o.require(matched == 200, "instances matched");
    o.detail << matched << "/200 exact";
  });

  criterion("AC3", "CheXpert@k invariance", 0, [](Outcome& o) {
    Rng rng(3003);
    int ok_rot = 0, ok_scale = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 3 + static_cast<int>(rng.index(48));
      const int d = 1 + static_cast<int>(rng.index(8));
      const int k = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(std::min(10, n - 1))));
      Eigen::MatrixXd e(n, d);
      for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
      std::vector<int> lab;
      for (int i = 0; i < n; ++i) lab.push_back(static_cast<int>(rng.index(4)));
      const auto base = chexpert_at_k(e, lab, k);
      const Eigen::MatrixXd rotated = e * ct::random_orthogonal(rng, d);
      const double c = std::exp(rng.uniform(-5.0, 5.0));
      ok_rot += same_scores(base, chexpert_at_k(rotated, lab, k));
      ok_scale += same_scores(base, chexpert_at_k((c * e).eval(), lab, k));
    }
    o.require(ok_rot == 50, "orthogonal");
    o.require(ok_scale == 50, "scaling");
    o.detail << "orthogonal " << ok_rot << "/50, scaling " << ok_scale << "/50";
  });

  criterion("AC4", "metric identities", 0, [](Outcome& o) {
    Rng rng(4004);
    int ssim_ok = 0, rmse_ok = 0, fid_ok = 0, cos_ok = 0;
    double worst_fid = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const int w = 11 + static_cast<int>(rng.index(30)), h = 11 + static_cast<int>(rng.index(30));
      const auto a = ct::random_image(rng, "a", w, h);
      ssim_ok += ssim(a, a) == 1.0;
      rmse_ok += rmse(a, a) == 0.0;
      const int rows = 2 + static_cast<int>(rng.index(40)), dims = 1 + static_cast<int>(rng.index(16));
      FeatureSet p{Eigen::MatrixXd(rows, dims), "x"};
      for (Eigen::Index i = 0; i < p.features.size(); ++i) p.features.data()[i] = rng.normal();
      const double f = fid(p, p);
      worst_fid = std::max(worst_fid, std::abs(f));
      fid_ok += std::abs(f) < 1e-8;
      const Eigen::VectorXd u = rng.normal_vector(1 + static_cast<Eigen::Index>(rng.index(64)));
      cos_ok += std::abs(cosine_similarity(u, u) - 1.0) <= 4 * std::numeric_limits<double>::epsilon();
    }
    o.require(ssim_ok == 100, "ssim(a,a)=1");
    o.require(rmse_ok == 100, "rmse(a,a)=0");
    o.require(fid_ok == 100, "fid(p,p)<1e-8");
    o.require(cos_ok == 100, "cosine(u,u)=1");
    const FeatureSet zeros{Eigen::MatrixXd::Zero(8, 2), "x"};
    FeatureSet shifted{Eigen::MatrixXd(8, 2), "x"};
    shifted.features.col(0).setConstant(3.0);
    shifted.features.col(1).setConstant(4.0);
    const double fc = fid(zeros, shifted);
    o.require(std::abs(fc - 25.0) <= 1e-8, "constant-set FID");
    auto x = ct::constant_image("x", 16, 16, 100.0 / 255.0), y = ct::constant_image("y", 16, 16, 101.0 / 255.0);
    const double ps = psnr(x, y);
    o.require(std::abs(ps - 20.0 * std::log10(255.0)) <= 1e-3 && std::abs(ps - 48.1308) <= 1e-3, "PSNR closed form");
    o.detail << "worst fid(p,p) " << worst_fid << ", constant FID " << fc << ", PSNR " << ps;
  });

  criterion("AC5", "finite-difference gradient checks", 60.0, [](Outcome& o) {
    Rng rng(5005);
    double worst_mlp = 0, worst_den = 0, worst_emb = 0;
    for (int draw = 0; draw < 20; ++draw) {
      const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng.index(6)), hdim = 2 + static_cast<Eigen::Index>(rng.index(10));
      const Eigen::Index rows = 1 + static_cast<Eigen::Index>(rng.index(4));
      ProjectionMLP m(d, hdim);
      for (Eigen::Index i = 0; i < m.parameters().size(); ++i) m.parameters()[i] = rng.normal();
      Eigen::MatrixXd x(rows, d), t(rows, d);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal(), t.data()[i] = rng.normal();
      Eigen::VectorXd g;
      projection_loss(m, x, t, &g);
      worst_mlp = std::max(worst_mlp, ct::max_fd_error(m.parameters(), g, [&] { return projection_loss(m, x, t); }));
    }
    for (int draw = 0; draw < 20; ++draw) {
      ToyBundleConfig bc;
      bc.image_size = 32;
      bc.latent = {2, 4, 4};
      bc.cond_width = 24;
      bc.hidden = 12;
      bc.vae_fit_images = 4;
      bc.seed = 100 + static_cast<std::uint64_t>(draw);
      auto b = build_toy_bundle(bc);
      auto& theta = b.denoiser->parameters();
      for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += 0.1 * rng.normal();
      const auto ids = b.text->tokenize("a photo of a lung xray with visible pleural effusion");
      const Latent x0 = rng.normal_vector(b.vae->latent_shape().size());
      const Latent eps = rng.normal_vector(x0.size());
      const int t = static_cast<int>(rng.index(static_cast<std::size_t>(b.schedule.timesteps)));
      const auto r = denoise_loss(b, x0, ids, t, eps, GradientMask{true, ids[5]});
      worst_den = std::max(worst_den, ct::max_fd_error(theta, r.denoiser_grad,
                                                       [&] { return denoise_loss(b, x0, ids, t, eps).loss; }));
      Eigen::VectorXd row = b.text->embedding_row(ids[5]);
      worst_emb = std::max(worst_emb, ct::max_fd_error(row, r.embedding_grad, [&] {
                             b.text->set_embedding_row(ids[5], row);
                             return denoise_loss(b, x0, ids, t, eps).loss;
                           }));
    }
    o.require(worst_mlp < 1e-4, "projection MLP");
    o.require(worst_den < 1e-4, "denoiser parameters");
    o.require(worst_emb < 1e-4, "embedding row");
    o.detail << "max rel err: mlp " << worst_mlp << ", denoiser " << worst_den << ", embedding " << worst_emb;
  });

  criterion("AC6", "forward-process statistics", 0, [](Outcome& o) {
    const auto s = default_toy_schedule();
    Rng rng(6006);
    const int n = 100000;
    const double x0 = 1.3;
    for (int t : {0, 49, 99}) {
      double sum = 0, sq = 0;
      for (int i = 0; i < n; ++i) {
        const double v = forward_diffuse(Latent::Constant(1, x0), t, rng.normal_vector(1), s)[0];
        sum += v;
        sq += v * v;
      }
      const double mean = sum / n, var = (sq - n * mean * mean) / (n - 1);
      const double ab = s.alpha_bars[static_cast<std::size_t>(t)];
      const double se_mean = std::sqrt((1 - ab) / n), se_var = (1 - ab) * std::sqrt(2.0 / (n - 1));
      const double zm = (mean - std::sqrt(ab) * x0) / se_mean, zv = (var - (1 - ab)) / se_var;
      o.require(std::abs(zm) < 3 && std::abs(zv) < 3, "t=" + std::to_string(t));
      o.detail << "t=" << t << " z_mean " << zm << " z_var " << zv << "; ";
    }
  });

  criterion("AC7", "oracle-denoiser inversion", 0, [](Outcome& o) {
    ToyBundleConfig bc;
    bc.hidden = 8;
    bc.cond_width = 16;
    bc.vae_fit_images = 4;
    const auto b = build_toy_bundle(bc);
    const auto cond = b.text->encode_text(kPositivePrompt);
    Rng rng(7007);
    double worst = 0;
    for (int i = 0; i < 10; ++i) {
      const Latent x0 = rng.normal_vector(b.vae->latent_shape().size());
      const ExactNoiseOracle oracle(x0, b.schedule, b.vae->latent_shape(), b.text->width());
      const Latent out = reverse_process(oracle, b.schedule, cond, rng.normal_vector(x0.size()), SamplerSettings{}, rng);
      worst = std::max(worst, (out - x0).cwiseAbs().maxCoeff());
    }
    o.require(worst < 1e-5, "max abs error");
    o.detail << "max abs error " << worst;
  });

  criterion("AC8", "freeze discipline", 0, [](Outcome& o) {
    ToyBundleConfig bc;
    bc.seed = 8;
    auto b = build_toy_bundle(bc);
    const auto reg = register_token(b, "<lung-xray>", std::string("photo"));
    const auto data = make_finetune_set({}, make_synthetic_cxrs(81, 5, true), "", "a photo of a <lung-xray>");
    FinetuneConfig ti;
    ti.strategy = FinetuneStrategy::textual_inversion;
    ti.steps = 50;
    ti.learning_rate = 5e-2;
    ti.seed = 8;
    auto before = ct::snapshot(b.parameter_blocks());
    train_textual_inversion(b, data, reg, ti);
    auto diff = ct::bitwise_diff(before, ct::snapshot(b.parameter_blocks()));
    std::set<long> rows;
    bool only_table = true;
    for (const auto& [name, idx] : diff) {
      only_table = only_table && name == "text.embeddings" && idx >= 0;
      rows.insert(idx % static_cast<long>(b.text->vocab_size()));
    }
    o.require(!diff.empty() && only_table && rows.size() == 1 && *rows.begin() == reg.token_id, "textual inversion");
    o.detail << "TI changed " << diff.size() << " values in " << rows.size() << " row(s); ";

    FinetuneConfig un;
    un.strategy = FinetuneStrategy::unet;
    un.steps = 20;
    un.seed = 8;
    before = ct::snapshot(b.parameter_blocks());
    train_unet(b, make_synthetic_finetune_set(82), un);
    diff = ct::bitwise_diff(before, ct::snapshot(b.parameter_blocks()));
    std::set<std::string> blocks;
    for (const auto& [name, idx] : diff) blocks.insert(name);
    o.require(!diff.empty() && blocks == std::set<std::string>{"denoiser"}, "U-Net");
    o.detail << "U-Net changed " << diff.size() << " values in " << blocks.size() << " block(s)";
  });

  ct::TempDir first("desk"), second("desk");
  DeskRun run1;
  criterion("AC9", "desk-scale end-to-end", 600.0, [&](Outcome& o) {
    run1 = desk_run(first.path(), 1);
    o.require(run1.auc >= 0.90, "AUC >= 0.90");
    o.require(run1.halving.halved(), "training loss halves");
    o.detail << "AUC " << run1.auc << ", acc " << run1.report.accuracy << ", loss " << run1.halving.head << " -> "
             << run1.halving.tail << " (instance term " << run1.instance_halving.head << " -> "
             << run1.instance_halving.tail << ")";
  });

  criterion("AC10", "determinism of the desk-scale run", 0, [&](Outcome& o) {
    const auto run2 = desk_run(second.path(), 1);
    o.require(ct::bitwise_diff(run1.params.at(0), run2.params.at(0)).empty(), "in-memory parameters");
    int files = 0, same = 0;
    for (const auto& entry : fs::recursive_directory_iterator(first.path())) {
      if (!entry.is_regular_file()) continue;
      ++files;
      const auto rel = fs::relative(entry.path(), first.path());
      same += fs::exists(second.path() / rel) && read_binary_file(entry.path()) == read_binary_file(second.path() / rel);
    }
    o.require(files > 0 && same == files, "artifact bytes");
    o.detail << same << "/" << files << " artifacts bit-identical";
  });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
