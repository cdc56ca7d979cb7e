#include "flashkit/train.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "flashkit/ops.hpp"

namespace flashkit {

namespace {

constexpr char kMagic[8] = {'F', 'L', 'A', 'S', 'H', 'K', 'I', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

// Held-out masks and training masks draw from disjoint seed streams.
constexpr std::uint64_t kEvalMaskStream = 0x45564131u;
constexpr std::uint64_t kTrainMaskStream = 0x54524e31u;

std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(step),
                    static_cast<std::uint32_t>(step >> 32)};
  return std::mt19937_64(seq);
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream, std::uint64_t step) {
  return step_rng(seed, stream, step)();
}

// Little-endian host layout; the checkpoint document states this.
class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open checkpoint '" + path.string() + "' for writing");
  }
  template <typename T>
  void pod(const T& value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void bytes(const void* data, std::size_t size) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size)); }
  void text(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void doubles(std::span<const double> xs) { bytes(xs.data(), xs.size() * sizeof(double)); }
  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("error writing checkpoint '" + path_.string() + "'");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  }
  template <typename T>
  T pod() {
    T value{};
    bytes(&value, sizeof(T));
    return value;
  }
  void bytes(void* data, std::size_t size) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
    if (!in_) throw std::runtime_error("checkpoint '" + path_.string() + "' is truncated");
  }
  std::string text() {
    const auto size = pod<std::uint64_t>();
    if (size > (1u << 26)) throw std::runtime_error("checkpoint '" + path_.string() + "' has a corrupt string length");
    std::string s(size, '\0');
    bytes(s.data(), size);
    return s;
  }
  std::vector<double> doubles(std::size_t count) {
    std::vector<double> xs(count);
    bytes(xs.data(), count * sizeof(double));
    return xs;
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

Objective parse_objective(std::string_view name) {
  if (name == "lm") return Objective::lm;
  if (name == "mlm") return Objective::mlm;
  throw ContractError("unknown objective '" + std::string(name) + "' (expected lm or mlm)");
}

std::string_view objective_name(Objective objective) { return objective == Objective::lm ? "lm" : "mlm"; }

void TrainConfig::validate() const {
  model.validate();
  if (batch == 0) throw ContractError("batch size must be positive");
  if (objective == Objective::lm && !model.causal) throw ContractError("the lm objective needs a causal model");
  if (objective == Objective::mlm) {
    if (model.causal) throw ContractError("the mlm objective needs a non-causal model");
    if (model.vocab <= static_cast<std::size_t>(kMaskToken)) {
      throw ContractError("the mlm objective needs vocab of at least 257 for the mask id");
    }
  }
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ContractError("hold-out fraction must be in (0, 1)");
  if (!(optimizer.peak_lr >= 0.0) || !(optimizer.eps > 0.0) || optimizer.clip < 0.0) {
    throw ContractError("optimizer settings out of range");
  }
  if (checkpoint_every != 0 && checkpoint_path.empty()) {
    throw ContractError("periodic checkpoints need a checkpoint path");
  }
}

std::string train_config_to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["model"] = nlohmann::ordered_json::parse(config_to_json(cfg.model));
  j["objective"] = std::string(objective_name(cfg.objective));
  j["batch"] = cfg.batch;
  j["steps"] = cfg.steps;
  j["seed"] = cfg.seed;
  j["mask_rate"] = cfg.mask_rate;
  j["holdout_fraction"] = cfg.holdout_fraction;
  j["eval_batches"] = cfg.eval_batches;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["checkpoint_path"] = cfg.checkpoint_path.string();
  auto& o = j["optimizer"];
  o["peak_lr"] = cfg.optimizer.peak_lr;
  o["beta1"] = cfg.optimizer.beta1;
  o["beta2"] = cfg.optimizer.beta2;
  o["eps"] = cfg.optimizer.eps;
  o["weight_decay"] = cfg.optimizer.weight_decay;
  o["clip"] = cfg.optimizer.clip;
  o["warmup"] = cfg.optimizer.warmup;
  return j.dump(2);
}

TrainConfig train_config_from_json(std::string_view text, TrainConfig base) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError(std::string("training config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ContractError("training config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "model") base.model = config_from_json(value.dump(), base.model);
      else if (key == "objective") base.objective = parse_objective(value.get<std::string>());
      else if (key == "batch") base.batch = value.get<std::size_t>();
      else if (key == "steps") base.steps = value.get<std::size_t>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else if (key == "mask_rate") base.mask_rate = value.get<double>();
      else if (key == "holdout_fraction") base.holdout_fraction = value.get<double>();
      else if (key == "eval_batches") base.eval_batches = value.get<std::size_t>();
      else if (key == "checkpoint_every") base.checkpoint_every = value.get<std::size_t>();
      else if (key == "checkpoint_path") base.checkpoint_path = value.get<std::string>();
      else if (key == "optimizer") {
        if (!value.is_object()) throw ContractError("optimizer settings must be a JSON object");
        for (const auto& [name, v] : value.items()) {
          if (name == "peak_lr") base.optimizer.peak_lr = v.get<double>();
          else if (name == "beta1") base.optimizer.beta1 = v.get<double>();
          else if (name == "beta2") base.optimizer.beta2 = v.get<double>();
          else if (name == "eps") base.optimizer.eps = v.get<double>();
          else if (name == "weight_decay") base.optimizer.weight_decay = v.get<double>();
          else if (name == "clip") base.optimizer.clip = v.get<double>();
          else if (name == "warmup") base.optimizer.warmup = v.get<std::size_t>();
          else throw ContractError("unknown optimizer key '" + name + "'");
        }
      } else {
        throw ContractError("unknown training config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::type_error& e) {
    throw ContractError(std::string("training config has a value of the wrong type: ") + e.what());
  }
  return base;
}

double lr_schedule(std::size_t step, std::size_t warmup, std::size_t total, double peak) {
  if (step > total) return 0.0;
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return step == warmup ? peak : 0.0;
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

std::size_t clip_local(std::vector<std::vector<double>>& grads, double threshold) {
  if (!(threshold > 0.0)) throw ContractError("clipping threshold must be positive");
  std::size_t clipped = 0;
  for (auto& g : grads) {
    double sq = 0.0;
    for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm <= threshold) continue;
    const double factor = threshold / norm;
    for (double& x : g) x *= factor;
    ++clipped;
  }
  return clipped;
}

OptimState OptimState::zeros_like(std::span<const Tensor> params) {
  OptimState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adamw_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, OptimState& state, double lr,
                const OptimizerConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("optimizer got " + std::to_string(grads.size()) + " gradients and " +
                         std::to_string(state.m.size()) + " moments for " + std::to_string(params.size()) +
                         " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i].numel();
    if (grads[i].size() != n || state.m[i].size() != n || state.v[i].size() != n) {
      throw DimensionError("gradient or moment of parameter " + std::to_string(i) + " does not match shape " +
                           to_string(params[i].shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      values[j] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * values[j]);
    }
  }
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, std::span<const std::uint8_t> corpus)
    : cfg_((cfg.validate(), std::move(cfg))),
      model_(cfg_.model, cfg_.seed),
      state_(OptimState::zeros_like(model_.params().tensors())),
      split_(split_corpus(corpus, cfg_.holdout_fraction)),
      stream_(split_.train, BatchOptions{cfg_.batch, cfg_.model.length,
                                         cfg_.model.kind == ModelKind::flash ? model_.config().chunk : 0, cfg_.seed,
                                         kDocumentDelimiter}) {
  if (cfg_.eval_batches > 0) {
    eval_batches_ = fixed_batches(split_.held_out, cfg_.eval_batches, cfg_.batch, cfg_.model.length);
  }
}

Tensor Trainer::loss_on(const Batch& batch, std::uint64_t mask_seed) const {
  if (cfg_.objective == Objective::lm) return lm_loss(model_, batch.tokens, batch.batch, batch.segment_ids);
  std::mt19937_64 rng(mask_seed);
  const auto mask = make_mlm_mask(batch.tokens, rng, cfg_.mask_rate);
  return mlm_loss(model_, mask, batch.batch, batch.segment_ids);
}

double Trainer::batch_loss(const Batch& batch, std::uint64_t mask_seed) const {
  NoGradScope no_grad;
  return loss_on(batch, mask_seed).item();
}

Trainer::StepResult Trainer::train_step() {
  const std::size_t step = this->step();
  const Batch batch = stream_.at(step);
  auto params = model_.params().tensors();
  for (auto& p : params) p.zero_grad();
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = loss_on(batch, mix(cfg_.seed, kTrainMaskStream, step));
  }
  tape.backward(loss);
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    const auto g = p.grad();
    grads.emplace_back(g.begin(), g.end());
  }
  if (cfg_.optimizer.clip > 0.0) clip_local(grads, cfg_.optimizer.clip);
  // The schedule is indexed from 1 so the first update is not a no-op.
  const double lr = lr_schedule(step + 1, cfg_.optimizer.warmup, cfg_.steps, cfg_.optimizer.peak_lr);
  adamw_step(params, grads, state_, lr, cfg_.optimizer);
  for (auto& p : params) p.zero_grad();
  return {step, loss.item(), lr};
}

double Trainer::evaluate() const {
  if (eval_batches_.empty()) throw ContractError("no held-out batches configured (eval_batches = 0)");
  double total = 0.0;
  for (std::size_t i = 0; i < eval_batches_.size(); ++i) {
    total += batch_loss(eval_batches_[i], mix(cfg_.seed, kEvalMaskStream, i));
  }
  return total / static_cast<double>(eval_batches_.size());
}

void Trainer::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    Writer w(tmp);
    w.bytes(kMagic, sizeof kMagic);
    w.pod(kCheckpointVersion);
    w.text(train_config_to_json(cfg_));
    w.pod<std::uint64_t>(state_.step);
    const auto& entries = model_.params().entries();
    w.pod<std::uint64_t>(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      w.text(e.name);
      w.pod<std::uint32_t>(static_cast<std::uint32_t>(e.value.rank()));
      for (std::size_t dim : e.value.shape()) w.pod<std::uint64_t>(dim);
      w.doubles(e.value.data());
      w.doubles(state_.m[i]);
      w.doubles(state_.v[i]);
    }
    w.finish();
  }
  std::filesystem::rename(tmp, path);
}

namespace {

// Opens `path`, checks the header and returns the stored training config.
TrainConfig read_checkpoint_header(Reader& r) {
  const auto& path = r.path();
  char magic[sizeof kMagic];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("'" + path.string() + "' is not a flashkit checkpoint");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint '" + path.string() + "' has unsupported version " + std::to_string(version));
  }
  return train_config_from_json(r.text());
}

// Reads the parameter records into `store`, and the moments into `state` when given.
void read_checkpoint_params(Reader& r, const ParamStore& store, OptimState* state) {
  const auto& path = r.path();
  const auto& entries = store.entries();
  const auto count = r.pod<std::uint64_t>();
  if (count != entries.size()) {
    throw std::runtime_error("checkpoint '" + path.string() + "' holds " + std::to_string(count) +
                             " parameters, the model has " + std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto name = r.text();
    Tensor value = entries[i].value;
    if (name != entries[i].name) {
      throw std::runtime_error("checkpoint '" + path.string() + "' parameter " + std::to_string(i) + " is '" + name +
                               "', expected '" + entries[i].name + "'");
    }
    Shape shape(r.pod<std::uint32_t>());
    for (auto& dim : shape) dim = r.pod<std::uint64_t>();
    if (shape != value.shape()) {
      throw std::runtime_error("checkpoint '" + path.string() + "' parameter '" + name + "' has shape " +
                               to_string(shape) + ", expected " + to_string(value.shape()));
    }
    const auto values = r.doubles(value.numel());
    std::copy(values.begin(), values.end(), value.mutable_data().begin());
    auto m = r.doubles(value.numel());
    auto v = r.doubles(value.numel());
    if (state) {
      state->m[i] = std::move(m);
      state->v[i] = std::move(v);
    }
  }
}

}  // namespace

Trainer Trainer::resume(const std::filesystem::path& path, std::span<const std::uint8_t> corpus) {
  Reader r(path);
  Trainer trainer(read_checkpoint_header(r), corpus);
  trainer.state_.step = r.pod<std::uint64_t>();
  read_checkpoint_params(r, trainer.model_.params(), &trainer.state_);
  return trainer;
}

LoadedModel load_model(const std::filesystem::path& path) {
  Reader r(path);
  auto cfg = read_checkpoint_header(r);
  Model model(cfg.model, cfg.seed);
  const auto step = r.pod<std::uint64_t>();
  read_checkpoint_params(r, model.params(), nullptr);
  return {std::move(cfg), step, std::move(model)};
}

TrainResult train_run(Trainer& trainer, const std::function<void(const Trainer::StepResult&)>& on_step) {
  const auto& cfg = trainer.config();
  TrainResult result;
  if (cfg.eval_batches > 0) result.initial_eval = trainer.evaluate();
  while (trainer.step() < cfg.steps) {
    const auto r = trainer.train_step();
    result.losses.push_back(r.loss);
    result.learning_rates.push_back(r.lr);
    if (on_step) on_step(r);
    if (cfg.checkpoint_every != 0 && trainer.step() % cfg.checkpoint_every == 0) trainer.save(cfg.checkpoint_path);
  }
  if (cfg.eval_batches > 0) result.final_eval = trainer.evaluate();
  return result;
}

TrainResult train_run(const TrainConfig& cfg, std::span<const std::uint8_t> corpus) {
  Trainer trainer(cfg, corpus);
  return train_run(trainer, {});
}

}  // namespace flashkit
