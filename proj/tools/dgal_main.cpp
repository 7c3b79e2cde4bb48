// Experiment driver: dataset construction, staged training, sampling,
// evaluation, and the ablation matrix. One command per process; every output
// directory receives the fully resolved config plus seeds and hashes, so a
// run can be reproduced from its artifacts alone.
//
// Exit codes: 0 success, 1 config error, 2 missing upstream artifact,
// 3 numerical divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dgal/config.hpp"
#include "dgal/image_io.hpp"
#include "dgal/metrics.hpp"
#include "dgal/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string text_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

void consume_known_keys(const dgal::Config& c);

dgal::Config load_config(const std::string& path) {
  dgal::Config c = dgal::Config::parse("");
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ArtifactError("config file not found: '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    c = dgal::Config::parse(ss.str());
  }
  consume_known_keys(c);
  c.reject_unknown_keys();
  return c;
}

fs::path resolve_out_dir(const std::string& flag, const std::string& fallback_name) {
  if (!flag.empty()) return flag;
  const char* root = std::getenv("DGAL_OUT_ROOT");
  return fs::path(root ? root : ".") / fallback_name;
}

// Claims an output directory: refuses a non-empty one without --force and
// holds a sentinel lock for the lifetime of the command.
class OutputDir {
 public:
  OutputDir(const fs::path& dir, bool force) : dir_(dir), lock_(dir / ".dgal.lock") {
    fs::create_directories(dir_);
    if (fs::exists(lock_))
      throw dgal::ConfigError("output dir '" + dir_.string() +
                              "' is locked by another run (stale? remove .dgal.lock)");
    bool empty = true;
    for (auto& e : fs::directory_iterator(dir_)) {
      (void)e;
      empty = false;
      break;
    }
    if (!empty && !force)
      throw dgal::ConfigError("output dir '" + dir_.string() +
                              "' is not empty (pass --force to overwrite)");
    std::ofstream(lock_.string()) << "pid unknown\n";
  }
  ~OutputDir() {
    std::error_code ec;
    fs::remove(lock_, ec);
  }
  const fs::path& path() const { return dir_; }
  fs::path file(const std::string& name) const { return dir_ / name; }

 private:
  fs::path dir_;
  fs::path lock_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ArtifactError("missing artifact: '" + path.string() + "'");
  json j;
  f >> j;
  return j;
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw ArtifactError("missing " + what + ": '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// shared config sections

struct ModelSettings {
  dgal::UNetConfig unet;
  std::vector<std::string> extra_tokens;
};

ModelSettings read_model_section(const dgal::Config& c) {
  ModelSettings m;
  m.unet.w0 = int(c.get_int("model.w0", m.unet.w0));
  m.unet.w1 = int(c.get_int("model.w1", m.unet.w1));
  m.unet.w2 = int(c.get_int("model.w2", m.unet.w2));
  m.unet.d_cond = int(c.get_int("model.d_cond", m.unet.d_cond));
  m.unet.seq_len = int(c.get_int("model.seq_len", m.unet.seq_len));
  m.unet.groups = int(c.get_int("model.groups", m.unet.groups));
  m.unet.time_dim = int(c.get_int("model.time_dim", m.unet.time_dim));
  m.unet.time_freq_dim = int(c.get_int("model.time_freq_dim", m.unet.time_freq_dim));
  m.extra_tokens = c.get_list("model.extra_tokens", {"[S]"});
  return m;
}

void record_model_section(dgal::Config& r, const ModelSettings& m) {
  r.set("model.w0", std::to_string(m.unet.w0));
  r.set("model.w1", std::to_string(m.unet.w1));
  r.set("model.w2", std::to_string(m.unet.w2));
  r.set("model.d_cond", std::to_string(m.unet.d_cond));
  r.set("model.seq_len", std::to_string(m.unet.seq_len));
  r.set("model.groups", std::to_string(m.unet.groups));
  r.set("model.time_dim", std::to_string(m.unet.time_dim));
  r.set("model.time_freq_dim", std::to_string(m.unet.time_freq_dim));
  std::string toks;
  for (auto& t : m.extra_tokens) toks += (toks.empty() ? "" : ", ") + t;
  r.set("model.extra_tokens", toks);
}

struct ScheduleSettings {
  int timesteps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
};

ScheduleSettings read_schedule_section(const dgal::Config& c) {
  ScheduleSettings s;
  s.timesteps = int(c.get_int("schedule.timesteps", s.timesteps));
  s.beta_min = c.get_double("schedule.beta_min", s.beta_min);
  s.beta_max = c.get_double("schedule.beta_max", s.beta_max);
  return s;
}

dgal::NoiseSchedule<float> schedule_from_metadata(const json& md) {
  const json& s = md.at("schedule");
  return dgal::make_linear_schedule<float>(s.at("timesteps"), s.at("beta_min"),
                                           s.at("beta_max"));
}

dgal::StageConfig<float> read_stage_section(const dgal::Config& c, const std::string& sec,
                                            const dgal::StageConfig<float>& defaults) {
  dgal::StageConfig<float> s = defaults;
  s.steps = int(c.get_int(sec + ".steps", s.steps));
  s.batch = int(c.get_int(sec + ".batch", s.batch));
  s.lr = c.get_double(sec + ".lr", s.lr);
  s.seed = std::uint64_t(c.get_int(sec + ".seed", std::int64_t(s.seed)));
  s.offset_noise = c.get_bool(sec + ".offset_noise", s.offset_noise);
  s.offset_noise_strength =
      float(c.get_double(sec + ".offset_noise_strength", s.offset_noise_strength));
  s.sim_recurrence = int(c.get_int(sec + ".sim_recurrence", s.sim_recurrence));
  s.adapter_rank = int(c.get_int(sec + ".adapter_rank", s.adapter_rank));
  s.log_every = int(c.get_int(sec + ".log_every", s.log_every));
  s.weights.prior = float(c.get_double("weights.prior", s.weights.prior));
  s.weights.disen = float(c.get_double("weights.disen", s.weights.disen));
  s.weights.erase = float(c.get_double("weights.erase", s.weights.erase));
  s.weights.sim = float(c.get_double("weights.sim", s.weights.sim));
  s.weights.subject = float(c.get_double("weights.subject", s.weights.subject));
  return s;
}

void record_stage_section(dgal::Config& r, const std::string& sec,
                          const dgal::StageConfig<float>& s) {
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  r.set(sec + ".steps", std::to_string(s.steps));
  r.set(sec + ".batch", std::to_string(s.batch));
  r.set(sec + ".lr", num(s.lr));
  r.set(sec + ".seed", std::to_string(s.seed));
  r.set(sec + ".offset_noise", s.offset_noise ? "true" : "false");
  r.set(sec + ".offset_noise_strength", num(s.offset_noise_strength));
  r.set(sec + ".sim_recurrence", std::to_string(s.sim_recurrence));
  r.set(sec + ".adapter_rank", std::to_string(s.adapter_rank));
  r.set(sec + ".log_every", std::to_string(s.log_every));
  r.set("weights.prior", num(s.weights.prior));
  r.set("weights.disen", num(s.weights.disen));
  r.set("weights.erase", num(s.weights.erase));
  r.set("weights.sim", num(s.weights.sim));
  r.set("weights.subject", num(s.weights.subject));
}

struct PriorSettings {
  int count = 200;
  int steps = 50;
  double lambda1 = 7.5;
  std::uint64_t seed = 17;
};

PriorSettings read_prior_section(const dgal::Config& c) {
  PriorSettings p;
  p.count = int(c.get_int("priors.count", p.count));
  p.steps = int(c.get_int("priors.steps", p.steps));
  p.lambda1 = c.get_double("priors.lambda1", p.lambda1);
  p.seed = std::uint64_t(c.get_int("priors.seed", std::int64_t(p.seed)));
  return p;
}

void record_prior_section(dgal::Config& r, const PriorSettings& p) {
  std::ostringstream l1;
  l1 << p.lambda1;
  r.set("priors.count", std::to_string(p.count));
  r.set("priors.steps", std::to_string(p.steps));
  r.set("priors.lambda1", l1.str());
  r.set("priors.seed", std::to_string(p.seed));
}

// One config file may drive the whole pipeline, so every command accepts the
// full key vocabulary; rejection still catches typos and stray sections.
void consume_known_keys(const dgal::Config& c) {
  read_model_section(c);
  read_schedule_section(c);
  dgal::StageConfig<float> d;
  read_stage_section(c, "erase", d);
  read_stage_section(c, "finetune", d);
  read_stage_section(c, "personalize", d);
  read_prior_section(c);
  c.get_list("data.categories", {});
  c.get_int("data.size", 0);
  c.get_double("data.binding", 0);
  c.get_double("data.v_share", 0);
  c.get_string("data.distractor", "");
  c.get_int("data.seed", 0);
  c.get_int("data.fewshot_k", 0);
  c.get_string("data.fewshot_style", "");
  c.get_int("extractor.size", 0);
  c.get_int("extractor.steps", 0);
  c.get_int("extractor.batch", 0);
  c.get_double("extractor.lr", 0);
  c.get_int("extractor.seed", 0);
  c.get_int("pretrain.steps", 0);
  c.get_int("pretrain.batch", 0);
  c.get_double("pretrain.lr", 0);
  c.get_int("pretrain.seed", 0);
  c.get_bool("pretrain.offset_noise", false);
  c.get_double("pretrain.offset_noise_strength", 0);
  c.get_int("pretrain.log_every", 0);
  c.get_string("erase.category", "");
  c.get_string("finetune.category", "");
  c.get_string("personalize.category", "");
  c.get_string("personalize.subject_category", "");
  c.get_string("personalize.subject_ident", "");
  c.get_string("personalize.subject_style", "");
  c.get_int("personalize.subject_k", 0);
  c.get_int("personalize.subject_seed", 0);
  c.get_string("evaluate.category", "");
  c.get_string("evaluate.style", "");
  c.get_int("evaluate.n", 0);
  c.get_int("evaluate.quick_n", 0);
  c.get_int("evaluate.reference_n", 0);
  c.get_int("evaluate.seed", 0);
  c.get_int("evaluate.steps", 0);
  c.get_double("evaluate.lambda1", 0);
  c.get_double("evaluate.lambda2", 0);
  c.get_string("evaluate.enhance", "");
  c.get_list("ablate.lambda_sim", {});
  c.get_list("ablate.enhance", {});
  c.get_bool("ablate.vary_erasure", true);
  c.get_bool("ablate.vary_disen", true);
  c.get_string("ablate.category", "");
  c.get_string("ablate.cross_category", "");
  c.get_string("ablate.style", "");
  c.get_int("ablate.n", 0);
  c.get_int("ablate.reference_n", 0);
  c.get_int("ablate.seed", 0);
  c.get_int("ablate.sample_steps", 0);
  c.get_double("ablate.lambda1", 0);
  c.get_double("ablate.lambda2", 0);
}

void finish_run(const OutputDir& out, dgal::Config& resolved) {
  write_text(out.file("config.toml"), resolved.serialize());
}

// ---------------------------------------------------------------------------
// artifact loading

std::vector<dgal::Image> load_image_list(const fs::path& dir, const json& files) {
  std::vector<dgal::Image> out;
  for (const auto& f : files) out.push_back(dgal::read_ppm((dir / f.get<std::string>()).string()));
  return out;
}

dgal::Corpus load_corpus(const fs::path& data_dir) {
  json manifest = read_json(data_dir / "manifest.json");
  dgal::Corpus corpus;
  for (const auto& e : manifest.at("corpus")) {
    dgal::CorpusEntry entry;
    entry.image = dgal::read_ppm((data_dir / e.at("file").get<std::string>()).string());
    entry.caption = e.at("caption");
    entry.labels = e.at("labels").get<std::vector<std::string>>();
    corpus.entries.push_back(std::move(entry));
  }
  return corpus;
}

std::vector<dgal::Image> load_fewshot(const fs::path& data_dir, const std::string& category) {
  json manifest = read_json(data_dir / "manifest.json");
  if (!manifest.at("fewshot").contains(category))
    throw ArtifactError("missing few-shot dataset for category '" + category + "'");
  return load_image_list(data_dir, manifest.at("fewshot").at(category).at("files"));
}

dgal::Denoiser<float> load_model_file(const fs::path& path, dgal::AdapterSet<float>* adapters,
                                      bool* has_adapters, json* metadata) {
  require_file(path, "model checkpoint");
  json md;
  dgal::Denoiser<float> net = dgal::load_model<float>(path.string(), nullptr, &md);
  if (has_adapters) *has_adapters = md.contains("adapters");
  if (adapters) {
    if (!md.contains("adapters"))
      throw ArtifactError("checkpoint '" + path.string() + "' carries no adapters");
    net = dgal::load_model<float>(path.string(), adapters, &md);
  }
  if (metadata) *metadata = md;
  return net;
}

// ---------------------------------------------------------------------------
// commands

int cmd_make_data(const std::string& config_path, const std::string& out_flag, bool force,
                  std::int64_t seed_flag) {
  dgal::Config c = load_config(config_path);
  std::vector<std::string> cats =
      c.get_list("data.categories", {"circle", "square", "triangle", "cross"});
  for (auto& cat : cats)
    if (std::find(dgal::categories().begin(), dgal::categories().end(), cat) ==
        dgal::categories().end())
      throw dgal::ConfigError("config: 'data.categories' has unknown category '" + cat + "'");
  int size = int(c.get_int("data.size", 10000));
  double binding = c.get_double("data.binding", 1.0);
  double v_share = c.get_double("data.v_share", 0.10);
  std::string distractor = c.get_string("data.distractor", "red-border");
  std::uint64_t seed = std::uint64_t(c.get_int("data.seed", 7));
  if (seed_flag >= 0) seed = std::uint64_t(seed_flag);
  int fewshot_k = int(c.get_int("data.fewshot_k", 10));
  std::string fewshot_style = c.get_string("data.fewshot_style", "sketch");
  int ex_size = int(c.get_int("extractor.size", 800));
  int ex_steps = int(c.get_int("extractor.steps", 1500));
  int ex_batch = int(c.get_int("extractor.batch", 16));
  double ex_lr = c.get_double("extractor.lr", 2e-3);
  std::uint64_t ex_seed = std::uint64_t(c.get_int("extractor.seed", 31));

  OutputDir out(resolve_out_dir(out_flag, "data"), force);
  dgal::Corpus corpus =
      dgal::build_pretrain_corpus(cats, size, float(binding), seed, float(v_share), distractor);

  fs::create_directories(out.file("corpus"));
  json corpus_manifest = json::array();
  for (size_t i = 0; i < corpus.entries.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "corpus/img_%05zu.ppm", i);
    dgal::write_ppm(out.file(name).string(), corpus.entries[i].image);
    corpus_manifest.push_back({{"file", name},
                               {"caption", corpus.entries[i].caption},
                               {"labels", corpus.entries[i].labels}});
  }

  json fewshot_manifest = json::object();
  for (size_t ci = 0; ci < cats.size(); ++ci) {
    dgal::DomainSpec spec;
    spec.category = cats[ci];
    spec.styles = {fewshot_style};
    std::uint64_t fs_seed = seed + 1000 + ci;
    dgal::FewShotDataset ds = dgal::make_fewshot_dataset(spec, fewshot_k, fs_seed);
    fs::create_directories(out.file("fewshot/" + cats[ci]));
    json files = json::array();
    for (size_t k = 0; k < ds.images.size(); ++k) {
      char name[64];
      std::snprintf(name, sizeof(name), "fewshot/%s/img_%02zu.ppm", cats[ci].c_str(), k);
      dgal::write_ppm(out.file(name).string(), ds.images[k].image);
      files.push_back(name);
    }
    fewshot_manifest[cats[ci]] = {
        {"style", fewshot_style}, {"k", fewshot_k}, {"seed", fs_seed}, {"files", files}};
  }

  dgal::FeatureExtractor<float> extractor;
  dgal::Rng ex_rng(ex_seed);
  extractor.init(ex_rng);
  dgal::train_extractor(extractor, dgal::make_extractor_corpus(ex_size, ex_seed + 1), ex_steps,
                        ex_batch, ex_lr, ex_seed + 2);
  extractor.freeze();
  dgal::save_extractor(out.file("extractor.ckpt").string(), extractor);

  json manifest = {{"seed", seed},
                   {"size", size},
                   {"categories", cats},
                   {"distractor", distractor},
                   {"binding", binding},
                   {"v_share", v_share},
                   {"corpus", corpus_manifest},
                   {"fewshot", fewshot_manifest}};
  write_json(out.file("manifest.json"), manifest);

  dgal::Config resolved;
  std::string cat_list;
  for (auto& cat : cats) cat_list += (cat_list.empty() ? "" : ", ") + cat;
  resolved.set("data.categories", cat_list);
  resolved.set("data.size", std::to_string(size));
  resolved.set("data.binding", std::to_string(binding));
  resolved.set("data.v_share", std::to_string(v_share));
  resolved.set("data.distractor", distractor);
  resolved.set("data.seed", std::to_string(seed));
  resolved.set("data.fewshot_k", std::to_string(fewshot_k));
  resolved.set("data.fewshot_style", fewshot_style);
  resolved.set("extractor.size", std::to_string(ex_size));
  resolved.set("extractor.steps", std::to_string(ex_steps));
  resolved.set("extractor.batch", std::to_string(ex_batch));
  resolved.set("extractor.lr", std::to_string(ex_lr));
  resolved.set("extractor.seed", std::to_string(ex_seed));
  finish_run(out, resolved);
  std::cout << "wrote " << size << " corpus images, " << cats.size()
            << " few-shot datasets, extractor to " << out.path().string() << "\n";
  return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& data_dir,
                 const std::string& out_flag, bool force) {
  dgal::Config c = load_config(config_path);
  ModelSettings model = read_model_section(c);
  ScheduleSettings sch_cfg = read_schedule_section(c);
  dgal::PretrainConfig<float> pc;
  pc.steps = int(c.get_int("pretrain.steps", pc.steps));
  pc.batch = int(c.get_int("pretrain.batch", pc.batch));
  pc.lr = c.get_double("pretrain.lr", pc.lr);
  pc.seed = std::uint64_t(c.get_int("pretrain.seed", 11));
  pc.offset_noise = c.get_bool("pretrain.offset_noise", pc.offset_noise);
  pc.offset_noise_strength =
      float(c.get_double("pretrain.offset_noise_strength", pc.offset_noise_strength));
  pc.log_every = int(c.get_int("pretrain.log_every", pc.log_every));

  require_file(fs::path(data_dir) / "manifest.json", "data manifest");
  dgal::Corpus corpus = load_corpus(data_dir);
  OutputDir out(resolve_out_dir(out_flag, "pretrain"), force);

  dgal::Denoiser<float> net;
  for (auto& tok : model.extra_tokens) net.vocab.add(tok);
  dgal::Rng rng(pc.seed);
  net.init(model.unet, rng);
  dgal::NoiseSchedule<float> sch = dgal::make_linear_schedule<float>(
      sch_cfg.timesteps, float(sch_cfg.beta_min), float(sch_cfg.beta_max));

  std::ofstream log(out.file("train.log"));
  dgal::pretrain_base(net, corpus, sch, pc, &log);
  net.freeze_base();

  dgal::Config resolved;
  record_model_section(resolved, model);
  resolved.set("schedule.timesteps", std::to_string(sch_cfg.timesteps));
  resolved.set("schedule.beta_min", std::to_string(sch_cfg.beta_min));
  resolved.set("schedule.beta_max", std::to_string(sch_cfg.beta_max));
  resolved.set("pretrain.steps", std::to_string(pc.steps));
  resolved.set("pretrain.batch", std::to_string(pc.batch));
  resolved.set("pretrain.lr", std::to_string(pc.lr));
  resolved.set("pretrain.seed", std::to_string(pc.seed));
  resolved.set("pretrain.offset_noise", pc.offset_noise ? "true" : "false");
  resolved.set("pretrain.offset_noise_strength", std::to_string(pc.offset_noise_strength));
  resolved.set("pretrain.log_every", std::to_string(pc.log_every));

  json extra = {{"stage", "pretrain"},
                {"seed", pc.seed},
                {"schedule",
                 {{"timesteps", sch_cfg.timesteps},
                  {"beta_min", sch_cfg.beta_min},
                  {"beta_max", sch_cfg.beta_max}}},
                {"config_hash", text_hash(resolved.serialize())},
                {"corpus_size", corpus.entries.size()}};
  dgal::save_model(out.file("model.ckpt").string(), net,
                   static_cast<const dgal::AdapterSet<float>*>(nullptr), extra);
  finish_run(out, resolved);
  std::cout << "stage=pretrain done steps=" << pc.steps
            << " model=" << out.file("model.ckpt").string() << "\n";
  return 0;
}

int cmd_erase(const std::string& config_path, const std::string& model_path,
              const std::string& out_flag, bool force) {
  dgal::Config c = load_config(config_path);
  dgal::StageConfig<float> defaults;
  defaults.seed = 13;
  dgal::StageConfig<float> sc = read_stage_section(c, "erase", defaults);
  std::string category = c.get_string("erase.category", "circle");
  PriorSettings pr = read_prior_section(c);

  json md;
  dgal::Denoiser<float> net = load_model_file(model_path, nullptr, nullptr, &md);
  dgal::NoiseSchedule<float> sch = schedule_from_metadata(md);
  OutputDir out(resolve_out_dir(out_flag, "erase"), force);

  dgal::PriorImageSet<float> priors = dgal::generate_prior_images(
      net, sch, category, pr.count, pr.seed, pr.steps, float(pr.lambda1));
  std::ofstream log(out.file("train.log"));
  dgal::StageResult<float> res = dgal::run_erasure_stage(net, sch, priors, category, sc, &log);

  dgal::Config resolved;
  record_stage_section(resolved, "erase", sc);
  resolved.set("erase.category", category);
  record_prior_section(resolved, pr);

  json extra = {{"stage", "erase"},
                {"category", category},
                {"seed", sc.seed},
                {"schedule", md.at("schedule")},
                {"config_hash", text_hash(resolved.serialize())},
                {"base_hash", dgal::model_hash(net)}};
  dgal::save_model(out.file("model.ckpt").string(), net, &res.adapters, extra);
  finish_run(out, resolved);
  std::cout << "stage=erase done steps=" << sc.steps
            << " model=" << out.file("model.ckpt").string() << "\n";
  return 0;
}

dgal::AdapterSet<float> fresh_adapters(const dgal::Denoiser<float>& net, int rank,
                                       std::uint64_t seed) {
  dgal::Rng rng(seed);
  return dgal::attach_adapters(net.unet, rank, dgal::default_adapter_targets(net.unet), rng);
}

int cmd_finetune(const std::string& config_path, const std::string& model_path,
                 const std::string& data_dir, const std::string& out_flag, bool force,
                 bool no_erasure, bool no_disen, bool no_sim, double lambda_sim) {
  dgal::Config c = load_config(config_path);
  dgal::StageConfig<float> defaults;
  defaults.steps = 1000;
  defaults.lr = 5e-5;
  defaults.seed = 19;
  dgal::StageConfig<float> sc = read_stage_section(c, "finetune", defaults);
  std::string category = c.get_string("finetune.category", "circle");
  PriorSettings pr = read_prior_section(c);
  if (no_disen) sc.weights.disen = 0;
  if (no_sim) sc.weights.sim = 0;
  if (lambda_sim >= 0) sc.weights.sim = float(lambda_sim);

  dgal::AdapterSet<float> init;
  json md;
  dgal::Denoiser<float> net = no_erasure ? load_model_file(model_path, nullptr, nullptr, &md)
                                         : load_model_file(model_path, &init, nullptr, &md);
  if (no_erasure) init = fresh_adapters(net, sc.adapter_rank, sc.seed);
  dgal::NoiseSchedule<float> sch = schedule_from_metadata(md);
  std::vector<dgal::Image> target_set = load_fewshot(data_dir, category);
  OutputDir out(resolve_out_dir(out_flag, "finetune"), force);

  dgal::PriorImageSet<float> priors = dgal::generate_prior_images(
      net, sch, category, pr.count, pr.seed, pr.steps, float(pr.lambda1));
  std::ofstream log(out.file("train.log"));
  dgal::StageResult<float> res =
      dgal::run_finetune_stage(net, sch, init, target_set, priors, category, sc, &log);

  dgal::Config resolved;
  record_stage_section(resolved, "finetune", sc);
  resolved.set("finetune.category", category);
  record_prior_section(resolved, pr);

  json extra = {{"stage", "finetune"},
                {"category", category},
                {"seed", sc.seed},
                {"schedule", md.at("schedule")},
                {"config_hash", text_hash(resolved.serialize())},
                {"base_hash", dgal::model_hash(net)},
                {"ablation",
                 {{"no_erasure", no_erasure},
                  {"no_disen", sc.weights.disen == 0},
                  {"no_sim", sc.weights.sim == 0},
                  {"lambda_sim", sc.weights.sim}}}};
  dgal::save_model(out.file("model.ckpt").string(), net, &res.adapters, extra);
  finish_run(out, resolved);
  std::cout << "stage=finetune done steps=" << sc.steps
            << " model=" << out.file("model.ckpt").string() << "\n";
  return 0;
}

int cmd_personalize(const std::string& config_path, const std::string& model_path,
                    const std::string& data_dir, const std::string& out_flag, bool force,
                    bool no_erasure) {
  dgal::Config c = load_config(config_path);
  dgal::StageConfig<float> defaults;
  defaults.steps = 1000;
  defaults.lr = 5e-5;
  defaults.seed = 23;
  dgal::StageConfig<float> sc = read_stage_section(c, "personalize", defaults);
  std::string category = c.get_string("personalize.category", "circle");
  std::string subject_category = c.get_string("personalize.subject_category", "square");
  std::string subject_ident = c.get_string("personalize.subject_ident", "[S]");
  std::string subject_style = c.get_string("personalize.subject_style", "tint");
  int subject_k = int(c.get_int("personalize.subject_k", 10));
  std::uint64_t subject_seed = std::uint64_t(c.get_int("personalize.subject_seed", 29));
  PriorSettings pr = read_prior_section(c);

  dgal::AdapterSet<float> init;
  json md;
  dgal::Denoiser<float> net = no_erasure ? load_model_file(model_path, nullptr, nullptr, &md)
                                         : load_model_file(model_path, &init, nullptr, &md);
  if (no_erasure) init = fresh_adapters(net, sc.adapter_rank, sc.seed);
  if (!net.vocab.has(subject_ident))
    throw dgal::ConfigError("config: 'personalize.subject_ident' token '" + subject_ident +
                            "' is not in the model vocabulary (pretrain with model.extra_tokens)");
  dgal::NoiseSchedule<float> sch = schedule_from_metadata(md);
  std::vector<dgal::Image> target_set = load_fewshot(data_dir, category);

  dgal::DomainSpec subj_spec;
  subj_spec.category = subject_category;
  subj_spec.styles = {subject_style};
  dgal::FewShotDataset subj_ds = dgal::make_fewshot_dataset(subj_spec, subject_k, subject_seed);
  std::vector<dgal::Image> subject_set;
  for (auto& li : subj_ds.images) subject_set.push_back(li.image);

  OutputDir out(resolve_out_dir(out_flag, "personalize"), force);
  dgal::PriorImageSet<float> priors = dgal::generate_prior_images(
      net, sch, category, pr.count, pr.seed, pr.steps, float(pr.lambda1));
  dgal::PriorImageSet<float> subj_priors = dgal::generate_prior_images(
      net, sch, subject_category, pr.count, pr.seed + 1, pr.steps, float(pr.lambda1));
  std::ofstream log(out.file("train.log"));
  dgal::StageResult<float> res = dgal::run_personalization_stage(
      net, sch, init, target_set, priors, category, subject_set, subj_priors, subject_category,
      subject_ident, sc, &log);

  dgal::Config resolved;
  record_stage_section(resolved, "personalize", sc);
  resolved.set("personalize.category", category);
  resolved.set("personalize.subject_category", subject_category);
  resolved.set("personalize.subject_ident", subject_ident);
  resolved.set("personalize.subject_style", subject_style);
  resolved.set("personalize.subject_k", std::to_string(subject_k));
  resolved.set("personalize.subject_seed", std::to_string(subject_seed));
  record_prior_section(resolved, pr);

  json extra = {{"stage", "personalize"},
                {"category", category},
                {"subject_category", subject_category},
                {"subject_ident", subject_ident},
                {"seed", sc.seed},
                {"schedule", md.at("schedule")},
                {"config_hash", text_hash(resolved.serialize())},
                {"base_hash", dgal::model_hash(net)}};
  dgal::save_model(out.file("model.ckpt").string(), net, &res.adapters, extra);
  finish_run(out, resolved);
  std::cout << "stage=personalize done steps=" << sc.steps
            << " model=" << out.file("model.ckpt").string() << "\n";
  return 0;
}

int cmd_generate(const std::string& model_path, const std::string& tmpl, int count,
                 const std::string& mode, double lambda1, double lambda2, int steps,
                 std::int64_t seed, const std::string& out_flag, bool force) {
  bool has_adapters = false;
  json md;
  dgal::AdapterSet<float> adapters;
  dgal::Denoiser<float> net = load_model_file(model_path, nullptr, &has_adapters, &md);
  if (has_adapters) net = load_model_file(model_path, &adapters, nullptr, &md);
  dgal::NoiseSchedule<float> sch = schedule_from_metadata(md);

  dgal::SamplerConfig<float> cfg;
  cfg.steps = steps;
  cfg.lambda1 = float(lambda1);
  cfg.lambda2 = float(lambda2);
  cfg.mode = mode;
  cfg.seed = std::uint64_t(seed);

  OutputDir out(resolve_out_dir(out_flag, "generate"), force);
  dgal::SampleResult<float> res =
      dgal::sample(net, has_adapters ? &adapters : nullptr, sch, tmpl, cfg, count);

  json files = json::array();
  for (size_t i = 0; i < res.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04zu.ppm", i);
    dgal::write_ppm(out.file(name).string(), res.images[i]);
    files.push_back(name);
  }
  json manifest = res.manifest;
  manifest["files"] = files;
  manifest["model_hash"] = dgal::model_hash(net, has_adapters ? &adapters : nullptr);
  write_json(out.file("manifest.json"), manifest);
  std::cout << "wrote " << count << " images to " << out.path().string() << "\n";
  return 0;
}

std::vector<dgal::Image> render_reference(const dgal::DomainSpec& spec, int n,
                                          std::uint64_t seed) {
  dgal::Rng rng(seed);
  std::vector<dgal::Image> out;
  for (int i = 0; i < n; ++i) out.push_back(dgal::render_image(spec, rng).image);
  return out;
}

// The evaluation grid of one adapted model: in-category samples, every
// cross-category transfer, a no-identifier leakage probe, and the rates of
// styles the domain does NOT have (spurious extra attributes).
std::vector<dgal::Scenario> build_grid(const dgal::Config& c, const fs::path& data_dir,
                                       const std::string& category, const std::string& style,
                                       int n, int reference_n, std::uint64_t seed) {
  json manifest = read_json(data_dir / "manifest.json");
  std::vector<std::string> cats = manifest.at("categories").get<std::vector<std::string>>();
  std::string distractor = manifest.at("distractor");
  std::vector<dgal::Scenario> grid;

  dgal::DomainSpec domain_spec;
  domain_spec.category = category;
  domain_spec.styles = {style};

  dgal::Scenario intra;
  intra.name = "intra";
  intra.prompt = dgal::template_tgt(category);
  intra.n = n;
  intra.reference = render_reference(domain_spec, reference_n, seed + 101);
  intra.fewshot = load_fewshot(data_dir, category);
  intra.attributes = {category, style, distractor};
  grid.push_back(std::move(intra));

  for (const auto& cat : cats) {
    if (cat == category) continue;
    dgal::DomainSpec cross_spec = domain_spec;
    cross_spec.category = cat;
    dgal::Scenario cross;
    cross.name = "cross-" + cat;
    cross.prompt = dgal::template_tgt(cat);
    cross.n = n;
    cross.reference = render_reference(cross_spec, reference_n, seed + 211);
    cross.fewshot = load_fewshot(data_dir, cat);
    cross.attributes = {cat, category, style, distractor};
    grid.push_back(std::move(cross));
  }

  dgal::DomainSpec plain_spec;
  plain_spec.category = category;
  dgal::Scenario leak;
  leak.name = "leak";
  leak.prompt = dgal::template_src(category);
  leak.n = n;
  leak.reference = render_reference(plain_spec, reference_n, seed + 307);
  leak.attributes = {category, style, distractor};
  grid.push_back(std::move(leak));

  dgal::Scenario extra;
  extra.name = "extra-attribute";
  extra.prompt = dgal::template_tgt(category);
  extra.n = n;
  for (const auto& s : {"sketch", "tint", "noiseband"})
    if (s != style) extra.attributes.push_back(s);
  grid.push_back(std::move(extra));
  (void)c;
  return grid;
}

int cmd_evaluate(const std::string& config_path, const std::string& model_path,
                 const std::string& data_dir, const std::string& out_flag, bool force,
                 bool quick) {
  dgal::Config c = load_config(config_path);
  std::string category = c.get_string("evaluate.category", "circle");
  std::string style = c.get_string("evaluate.style", "sketch");
  int n = int(c.get_int("evaluate.n", 1000));
  if (quick) n = int(c.get_int("evaluate.quick_n", 100));
  else
    c.get_int("evaluate.quick_n", 100);
  int reference_n = int(c.get_int("evaluate.reference_n", 200));
  std::uint64_t seed = std::uint64_t(c.get_int("evaluate.seed", 37));
  int steps = int(c.get_int("evaluate.steps", 50));
  double lambda1 = c.get_double("evaluate.lambda1", 7.5);
  double lambda2 = c.get_double("evaluate.lambda2", 1.0);
  std::string mode = c.get_string("evaluate.enhance", "v-uncond");

  require_file(fs::path(data_dir) / "extractor.ckpt", "feature extractor checkpoint");
  dgal::FeatureExtractor<float> extractor =
      dgal::load_extractor<float>((fs::path(data_dir) / "extractor.ckpt").string());

  bool has_adapters = false;
  json md;
  dgal::AdapterSet<float> adapters;
  dgal::Denoiser<float> net = load_model_file(model_path, nullptr, &has_adapters, &md);
  if (has_adapters) net = load_model_file(model_path, &adapters, nullptr, &md);
  dgal::NoiseSchedule<float> sch = schedule_from_metadata(md);

  dgal::SamplerConfig<float> cfg;
  cfg.steps = steps;
  cfg.lambda1 = float(lambda1);
  cfg.lambda2 = float(lambda2);
  cfg.mode = mode;
  cfg.seed = seed;

  OutputDir out(resolve_out_dir(out_flag, "evaluate"), force);
  std::vector<dgal::Scenario> grid =
      build_grid(c, data_dir, category, style, n, reference_n, seed);
  std::string hash = dgal::model_hash(net, has_adapters ? &adapters : nullptr);
  json report = dgal::evaluation_report(net, has_adapters ? &adapters : nullptr, sch, cfg,
                                        extractor, grid, hash);
  write_json(out.file("report.json"), report);
  write_text(out.file("report.txt"), dgal::report_table(report));

  dgal::Config resolved;
  resolved.set("evaluate.category", category);
  resolved.set("evaluate.style", style);
  resolved.set("evaluate.n", std::to_string(n));
  resolved.set("evaluate.quick_n", std::to_string(int(c.get_int("evaluate.quick_n", 100))));
  resolved.set("evaluate.reference_n", std::to_string(reference_n));
  resolved.set("evaluate.seed", std::to_string(seed));
  resolved.set("evaluate.steps", std::to_string(steps));
  resolved.set("evaluate.lambda1", std::to_string(lambda1));
  resolved.set("evaluate.lambda2", std::to_string(lambda2));
  resolved.set("evaluate.enhance", mode);
  finish_run(out, resolved);
  std::cout << dgal::report_table(report);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& model_path,
               const std::string& data_dir, const std::string& out_flag, bool force) {
  dgal::Config c = load_config(config_path);
  std::vector<std::string> lambda_strs =
      c.get_list("ablate.lambda_sim", {"0", "0.25", "0.5", "1.0", "2.0"});
  std::vector<std::string> modes = c.get_list("ablate.enhance", {"vn-n", "v-uncond"});
  bool vary_erasure = c.get_bool("ablate.vary_erasure", true);
  bool vary_disen = c.get_bool("ablate.vary_disen", true);
  std::string category = c.get_string("ablate.category", "circle");
  std::string cross_category = c.get_string("ablate.cross_category", "square");
  std::string style = c.get_string("ablate.style", "sketch");
  int n = int(c.get_int("ablate.n", 100));
  int reference_n = int(c.get_int("ablate.reference_n", 100));
  std::uint64_t seed = std::uint64_t(c.get_int("ablate.seed", 41));
  int sample_steps = int(c.get_int("ablate.sample_steps", 50));
  double lambda1 = c.get_double("ablate.lambda1", 7.5);
  double lambda2 = c.get_double("ablate.lambda2", 1.0);
  dgal::StageConfig<float> ft_defaults;
  ft_defaults.steps = 1000;
  ft_defaults.lr = 5e-5;
  ft_defaults.seed = 19;
  dgal::StageConfig<float> ft = read_stage_section(c, "finetune", ft_defaults);
  dgal::StageConfig<float> er_defaults;
  er_defaults.seed = 13;
  dgal::StageConfig<float> er = read_stage_section(c, "erase", er_defaults);
  PriorSettings pr = read_prior_section(c);

  json md;
  dgal::Denoiser<float> net = load_model_file(model_path, nullptr, nullptr, &md);
  dgal::NoiseSchedule<float> sch = schedule_from_metadata(md);
  std::string base_hash = dgal::model_hash(net);
  std::vector<dgal::Image> target_set = load_fewshot(data_dir, category);

  require_file(fs::path(data_dir) / "extractor.ckpt", "feature extractor checkpoint");
  dgal::FeatureExtractor<float> extractor =
      dgal::load_extractor<float>((fs::path(data_dir) / "extractor.ckpt").string());

  OutputDir out(resolve_out_dir(out_flag, "ablate"), force);
  dgal::PriorImageSet<float> priors = dgal::generate_prior_images(
      net, sch, category, pr.count, pr.seed, pr.steps, float(pr.lambda1));

  std::vector<bool> erasure_axis = vary_erasure ? std::vector<bool>{true, false}
                                                : std::vector<bool>{true};
  std::vector<bool> disen_axis = vary_disen ? std::vector<bool>{true, false}
                                            : std::vector<bool>{true};

  dgal::AdapterSet<float> erased = fresh_adapters(net, ft.adapter_rank, er.seed);
  if (std::find(erasure_axis.begin(), erasure_axis.end(), true) != erasure_axis.end() &&
      er.steps > 0)
    erased = dgal::run_erasure_stage(net, sch, priors, category, er).adapters;

  json manifest = read_json(fs::path(data_dir) / "manifest.json");
  std::string distractor = manifest.at("distractor");
  dgal::DomainSpec cross_spec;
  cross_spec.category = cross_category;
  cross_spec.styles = {style};

  json rows = json::array();
  for (bool with_erasure : erasure_axis)
    for (bool with_disen : disen_axis)
      for (const auto& ls : lambda_strs) {
        double lam = std::stod(ls);
        dgal::StageConfig<float> cell = ft;
        if (!with_disen) cell.weights.disen = 0;
        cell.weights.sim = float(lam);
        const dgal::AdapterSet<float>& init =
            with_erasure ? erased : fresh_adapters(net, ft.adapter_rank, ft.seed);
        dgal::StageResult<float> res =
            dgal::run_finetune_stage(net, sch, init, target_set, priors, category, cell);
        for (const auto& mode : modes) {
          dgal::Scenario sc;
          sc.name = "cross-" + cross_category;
          sc.prompt = dgal::template_tgt(cross_category);
          sc.n = n;
          sc.reference = render_reference(cross_spec, reference_n, seed + 211);
          sc.fewshot = load_fewshot(data_dir, cross_category);
          sc.attributes = {cross_category, category, style, distractor};
          dgal::SamplerConfig<float> scfg;
          scfg.steps = sample_steps;
          scfg.lambda1 = float(lambda1);
          scfg.lambda2 = float(lambda2);
          scfg.mode = mode;
          scfg.seed = seed;
          json rep = dgal::evaluation_report(net, &res.adapters, sch, scfg, extractor, {sc},
                                             base_hash);
          json row = rep.at(0);
          row["cell"] = {{"erasure", with_erasure},
                         {"disen", with_disen},
                         {"lambda_sim", lam},
                         {"enhance", mode}};
          row["checkpoint_hash"] = base_hash;
          rows.push_back(std::move(row));
        }
      }

  write_json(out.file("ablate.json"), rows);
  std::ostringstream table;
  table << "erasure  disen  lambda_sim  enhance    kid        intra_lpips\n";
  for (const auto& row : rows) {
    const json& cell = row.at("cell");
    char line[128];
    std::snprintf(line, sizeof(line), "%-8s %-6s %-11.3g %-10s %-10.4g %-10.4g\n",
                  cell.at("erasure").get<bool>() ? "yes" : "no",
                  cell.at("disen").get<bool>() ? "yes" : "no", cell.at("lambda_sim").get<double>(),
                  cell.at("enhance").get<std::string>().c_str(),
                  row.at("kid").is_null() ? 0.0 : row.at("kid").get<double>(),
                  row.at("intra_lpips").is_null() ? 0.0 : row.at("intra_lpips").get<double>());
    table << line;
  }
  write_text(out.file("ablate.txt"), table.str());

  dgal::Config resolved;
  std::string lam_list, mode_list;
  for (auto& l : lambda_strs) lam_list += (lam_list.empty() ? "" : ", ") + l;
  for (auto& m : modes) mode_list += (mode_list.empty() ? "" : ", ") + m;
  resolved.set("ablate.lambda_sim", lam_list);
  resolved.set("ablate.enhance", mode_list);
  resolved.set("ablate.vary_erasure", vary_erasure ? "true" : "false");
  resolved.set("ablate.vary_disen", vary_disen ? "true" : "false");
  resolved.set("ablate.category", category);
  resolved.set("ablate.cross_category", cross_category);
  resolved.set("ablate.style", style);
  resolved.set("ablate.n", std::to_string(n));
  resolved.set("ablate.reference_n", std::to_string(reference_n));
  resolved.set("ablate.seed", std::to_string(seed));
  resolved.set("ablate.sample_steps", std::to_string(sample_steps));
  resolved.set("ablate.lambda1", std::to_string(lambda1));
  resolved.set("ablate.lambda2", std::to_string(lambda2));
  record_stage_section(resolved, "finetune", ft);
  record_stage_section(resolved, "erase", er);
  record_prior_section(resolved, pr);
  finish_run(out, resolved);
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"domain-adaptive diffusion finetuning laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, model_path, data_dir;
  bool force = false;

  auto add_common = [&](CLI::App* cmd, bool with_config = true) {
    if (with_config) cmd->add_option("--config", config_path, "experiment config file");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_flag("--force", force, "overwrite a non-empty output directory");
  };

  std::int64_t seed_flag = -1;
  CLI::App* mk = app.add_subcommand("make-data", "render corpus + few-shot datasets");
  add_common(mk);
  mk->add_option("--seed", seed_flag, "override data.seed");

  CLI::App* pt = app.add_subcommand("pretrain", "train the base model on the corpus");
  add_common(pt);
  pt->add_option("--data", data_dir, "data directory")->required();

  CLI::App* er = app.add_subcommand("erase", "remove the identifier's prior attributes");
  add_common(er);
  er->add_option("--model", model_path, "base model checkpoint")->required();

  bool no_erasure = false, no_disen = false, no_sim = false;
  double lambda_sim = -1;
  CLI::App* ft = app.add_subcommand("finetune", "few-shot domain adaptation");
  add_common(ft);
  ft->add_option("--model", model_path, "erased model checkpoint (base with --no-erasure)")
      ->required();
  ft->add_option("--data", data_dir, "data directory")->required();
  ft->add_flag("--no-erasure", no_erasure, "start from fresh adapters on the base model");
  ft->add_flag("--no-disen", no_disen, "disable the disentanglement term");
  ft->add_flag("--no-sim", no_sim, "disable the similarity regularizer");
  ft->add_option("--lambda-sim", lambda_sim, "override the similarity weight");

  CLI::App* ps = app.add_subcommand("personalize", "domain + subject binding in one stage");
  add_common(ps);
  ps->add_option("--model", model_path, "erased model checkpoint (base with --no-erasure)")
      ->required();
  ps->add_option("--data", data_dir, "data directory")->required();
  ps->add_flag("--no-erasure", no_erasure, "start from fresh adapters on the base model");

  std::string tmpl = "a [V] circle", mode = "none";
  int count = 1, steps = 50;
  double lambda1 = 7.5, lambda2 = 1.0;
  std::int64_t gen_seed = 0;
  CLI::App* gen = app.add_subcommand("generate", "sample images from a checkpoint");
  add_common(gen, false);
  gen->add_option("--model", model_path, "model checkpoint")->required();
  gen->add_option("--template", tmpl, "prompt template");
  gen->add_option("--count", count, "number of images");
  gen->add_option("--enhance", mode, "enhancement mode: none | vn-n | v-uncond");
  gen->add_option("--lambda1", lambda1, "guidance weight");
  gen->add_option("--lambda2", lambda2, "enhancement weight");
  gen->add_option("--steps", steps, "sampler steps");
  gen->add_option("--seed", gen_seed, "sampling seed");

  bool quick = false;
  CLI::App* ev = app.add_subcommand("evaluate", "score a checkpoint on the scenario grid");
  add_common(ev);
  ev->add_option("--model", model_path, "model checkpoint")->required();
  ev->add_option("--data", data_dir, "data directory")->required();
  ev->add_flag("--quick", quick, "use the reduced sample count");

  CLI::App* ab = app.add_subcommand("ablate", "run the technique ablation matrix");
  add_common(ab);
  ab->add_option("--model", model_path, "base model checkpoint")->required();
  ab->add_option("--data", data_dir, "data directory")->required();

  try {
    app.parse(argc, argv);
    if (mk->parsed()) return cmd_make_data(config_path, out_dir, force, seed_flag);
    if (pt->parsed()) return cmd_pretrain(config_path, data_dir, out_dir, force);
    if (er->parsed()) return cmd_erase(config_path, model_path, out_dir, force);
    if (ft->parsed())
      return cmd_finetune(config_path, model_path, data_dir, out_dir, force, no_erasure,
                          no_disen, no_sim, lambda_sim);
    if (ps->parsed())
      return cmd_personalize(config_path, model_path, data_dir, out_dir, force, no_erasure);
    if (gen->parsed())
      return cmd_generate(model_path, tmpl, count, mode, lambda1, lambda2, steps, gen_seed,
                          out_dir, force);
    if (ev->parsed())
      return cmd_evaluate(config_path, model_path, data_dir, out_dir, force, quick);
    if (ab->parsed()) return cmd_ablate(config_path, model_path, data_dir, out_dir, force);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const dgal::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::cerr << "error: " << msg << "\n";
    return msg.find("diverged") != std::string::npos ? 3 : 1;
  }
}
