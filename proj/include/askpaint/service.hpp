#pragma once

// Steering sessions: a caller uploads an image, sees the model's first
// colorization and question, and answers each question with either a custom
// display color or the oracle answer computed from ground truth.
//
// This header holds the transport-independent core. service_http.hpp binds it
// to HTTP routes.

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "askpaint/answer_oracle.hpp"
#include "askpaint/checkpoint.hpp"
#include "askpaint/color.hpp"
#include "askpaint/episode.hpp"
#include "askpaint/errors.hpp"
#include "askpaint/image_io.hpp"
#include "askpaint/visualize.hpp"

namespace askpaint::service {

// Errors carry the HTTP status the transport should use.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

inline ServiceError bad_request(const std::string& m) { return {400, m}; }
inline ServiceError not_found(const std::string& m) { return {404, m}; }
inline ServiceError conflict(const std::string& m) { return {409, m}; }
inline ServiceError unprocessable(const std::string& m) { return {422, m}; }

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw bad_request("base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw bad_request("invalid base64 payload");
  std::size_t pad = 0;
  for (auto it = text.rbegin(); it != text.rend() && *it == '='; ++it) ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

inline std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(bytes.data(), bytes.size(), digest);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned char c : digest) {
    s.push_back(hex[c >> 4]);
    s.push_back(hex[c & 15]);
  }
  return s;
}

// Content-addressed PNG store with reference counts held by sessions.
class BlobStore {
 public:
  std::string put(std::vector<std::uint8_t> bytes) {
    std::string h = sha256_hex(bytes);
    std::lock_guard lock(mu_);
    auto& e = blobs_[h];
    if (e.refs == 0) e.bytes = std::move(bytes);
    ++e.refs;
    return h;
  }
  void release(const std::string& hash) {
    std::lock_guard lock(mu_);
    auto it = blobs_.find(hash);
    if (it != blobs_.end() && --it->second.refs == 0) blobs_.erase(it);
  }
  std::optional<std::vector<std::uint8_t>> get(const std::string& hash) const {
    std::lock_guard lock(mu_);
    auto it = blobs_.find(hash);
    if (it == blobs_.end()) return std::nullopt;
    return it->second.bytes;
  }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return blobs_.size();
  }

 private:
  struct Entry {
    std::vector<std::uint8_t> bytes;
    std::size_t refs = 0;
  };
  mutable std::mutex mu_;
  std::unordered_map<std::string, Entry> blobs_;
};

// Mutex granting ownership in request order.
class FifoMutex {
 public:
  void lock() {
    std::unique_lock l(mu_);
    const std::uint64_t ticket = next_++;
    cv_.wait(l, [&] { return serving_ == ticket; });
  }
  void unlock() {
    {
      std::lock_guard l(mu_);
      ++serving_;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::uint64_t next_ = 0;
  std::uint64_t serving_ = 0;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint_dir = "checkpoints";
  double session_ttl_seconds = 1800;
  double reap_interval_seconds = 30;
  // Closed sessions answer GET with a tombstone instead of 404.
  bool tombstones = false;
  // Debug only: perturb oracle answers as during training.
  NoiseConfig debug_noise{false, 0.05, 0};
};

inline void from_json(const nlohmann::json& j, ServiceConfig& c) {
  c.host = j.value("host", c.host);
  c.port = j.value("port", c.port);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir.string());
  c.session_ttl_seconds = j.value("session_ttl_seconds", c.session_ttl_seconds);
  c.reap_interval_seconds = j.value("reap_interval_seconds", c.reap_interval_seconds);
  c.tombstones = j.value("tombstones", c.tombstones);
  c.debug_noise.enabled = j.value("debug_noise", c.debug_noise.enabled);
  c.debug_noise.sigma = j.value("debug_noise_sigma", c.debug_noise.sigma);
}

inline void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"checkpoint_dir", c.checkpoint_dir.string()},
       {"session_ttl_seconds", c.session_ttl_seconds},
       {"reap_interval_seconds", c.reap_interval_seconds},
       {"tombstones", c.tombstones},
       {"debug_noise", c.debug_noise.enabled},
       {"debug_noise_sigma", c.debug_noise.sigma}};
}

// ASKPAINT_PORT, ASKPAINT_CHECKPOINT_DIR and ASKPAINT_SESSION_TTL override the file.
inline void apply_environment(ServiceConfig& c) {
  if (const char* p = std::getenv("ASKPAINT_PORT")) {
    try {
      c.port = std::stoi(p);
    } catch (const std::exception&) {
      throw ValidationError(std::string("ASKPAINT_PORT is not an integer: ") + p);
    }
  }
  if (const char* d = std::getenv("ASKPAINT_CHECKPOINT_DIR")) c.checkpoint_dir = d;
  if (const char* t = std::getenv("ASKPAINT_SESSION_TTL")) {
    try {
      c.session_ttl_seconds = std::stod(t);
    } catch (const std::exception&) {
      throw ValidationError(std::string("ASKPAINT_SESSION_TTL is not a number: ") + t);
    }
  }
}

using Model = ColorizerModel<float>;

struct CheckpointInfo {
  std::string id;
  ModelConfig model_config;
  std::int64_t step_count = 0;
  nlohmann::json train_config;
};

// Checkpoints are the *.ckpt files of one directory, keyed by file stem.
class CheckpointRegistry {
 public:
  explicit CheckpointRegistry(std::filesystem::path dir) : dir_(std::move(dir)) {}

  // Registers an in-memory model (tests, embedding).
  void add(const std::string& id, Checkpoint<float> ckpt) {
    std::unique_lock lock(mu_);
    loaded_[id] = std::make_shared<const Checkpoint<float>>(std::move(ckpt));
  }

  std::vector<CheckpointInfo> list() {
    std::vector<std::string> ids;
    {
      std::shared_lock lock(mu_);
      for (const auto& [id, _] : loaded_) ids.push_back(id);
    }
    std::error_code ec;
    if (std::filesystem::is_directory(dir_, ec))
      for (const auto& e : std::filesystem::directory_iterator(dir_))
        if (e.is_regular_file() && e.path().extension() == ".ckpt") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    std::vector<CheckpointInfo> out;
    for (const auto& id : ids) {
      try {
        const auto c = get(id);
        out.push_back({id, c->model.config(), c->step_count, c->train_config});
      } catch (const CheckpointError&) {
        // unreadable files are not offered
      }
    }
    return out;
  }

  std::shared_ptr<const Checkpoint<float>> get(const std::string& id) {
    {
      std::shared_lock lock(mu_);
      if (auto it = loaded_.find(id); it != loaded_.end()) return it->second;
    }
    if (id.empty() || id.find('/') != std::string::npos || id.find("..") != std::string::npos)
      throw not_found("unknown checkpoint '" + id + "'");
    const auto path = dir_ / (id + ".ckpt");
    if (!std::filesystem::is_regular_file(path)) throw not_found("unknown checkpoint '" + id + "'");
    auto ck = std::make_shared<const Checkpoint<float>>(load_checkpoint<float>(path));
    std::unique_lock lock(mu_);
    return loaded_.emplace(id, std::move(ck)).first->second;
  }

 private:
  std::filesystem::path dir_;
  std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<const Checkpoint<float>>> loaded_;
};

enum class SessionStatus { Active, Exhausted, Closed };

inline std::string to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::Active: return "active";
    case SessionStatus::Exhausted: return "exhausted";
    case SessionStatus::Closed: return "closed";
  }
  return "unknown";
}

using Clock = std::chrono::steady_clock;

struct StepImages {
  std::string prediction_blob;
  std::string question_blob;
};

struct Session {
  std::string id;
  std::string checkpoint_id;
  std::shared_ptr<const Checkpoint<float>> checkpoint;
  ColorSpaceSpec color_space;
  EpisodeState<float> episode;
  std::optional<Tensor<float>> ground_truth;
  Clock::time_point created_at;
  Clock::time_point last_activity;
  SessionStatus status = SessionStatus::Active;
  std::vector<StepImages> images;
  std::vector<std::string> answer_modes;
  std::mt19937_64 noise_rng;

  FifoMutex op_mutex;
  std::atomic<int> in_flight{0};
};

struct CreateOptions {
  std::optional<ColorMode> color_space;
  int max_answers = -1;  // < 0: checkpoint default
  std::string checkpoint_id;
  std::optional<std::vector<std::uint8_t>> ground_truth_png;
  bool image_is_ground_truth = false;
  bool resize = false;
};

enum class AnswerMode { Custom, Oracle };

struct AnswerSubmission {
  AnswerMode mode = AnswerMode::Custom;
  std::optional<Rgb8> color;
  std::optional<std::vector<std::uint8_t>> ground_truth_png;
};

struct StepResult {
  std::string session_id;
  int step = 0;
  bool exhausted = false;
  std::vector<std::uint8_t> prediction_png;
  std::string prediction_blob;
  std::optional<std::vector<std::uint8_t>> question_png;  // absent once exhausted
  std::string question_blob;
  QuestionMap<float> question;
  std::optional<AnswerColor<float>> answer;  // the answer consumed by this step
};

class SessionManager {
 public:
  explicit SessionManager(ServiceConfig config, std::function<Clock::time_point()> clock = Clock::now)
      : config_(std::move(config)), clock_(std::move(clock)), registry_(config_.checkpoint_dir),
        id_rng_(std::random_device{}()) {}

  CheckpointRegistry& checkpoints() { return registry_; }
  BlobStore& blobs() { return blobs_; }
  const ServiceConfig& config() const { return config_; }

  StepResult create_session(const std::vector<std::uint8_t>& image_png, const CreateOptions& opt) {
    Raster8 image;
    try {
      image = decode_png(image_png);
    } catch (const ValidationError& e) {
      throw bad_request(std::string("image: ") + e.what());
    }
    const auto ckpt = registry_.get(opt.checkpoint_id);
    const ModelConfig& mc = ckpt->model.config();
    const ColorSpaceSpec space{mc.color_space};
    if (opt.color_space && *opt.color_space != mc.color_space)
      throw unprocessable("checkpoint '" + opt.checkpoint_id + "' colorizes in " + to_string(mc.color_space) +
                          ", request asked for " + to_string(*opt.color_space));
    image = fit(std::move(image), mc, opt.resize, "image");
    auto ms = to_model_space<float>(image, space);

    std::optional<Tensor<float>> truth;
    if (opt.ground_truth_png) {
      Raster8 gt;
      try {
        gt = decode_png(*opt.ground_truth_png);
      } catch (const ValidationError& e) {
        throw bad_request(std::string("ground_truth: ") + e.what());
      }
      truth = to_model_space<float>(fit(std::move(gt), mc, opt.resize, "ground_truth"), space).target;
    } else if (opt.image_is_ground_truth) {
      truth = ms.target;
    }

    int max_answers = opt.max_answers;
    if (max_answers < 0) max_answers = ckpt->train_config.value("max_answers", 4);

    auto s = std::make_shared<Session>();
    s->checkpoint_id = opt.checkpoint_id;
    s->checkpoint = ckpt;
    s->color_space = space;
    s->ground_truth = std::move(truth);
    s->created_at = s->last_activity = clock_();
    s->noise_rng.seed(config_.debug_noise.seed);
    try {
      s->episode = init_episode(std::move(ms.input), max_answers, mc.color_channels());
      s->episode = advance(std::move(s->episode), ckpt->model, std::optional<AnswerColor<float>>());
    } catch (const ValidationError& e) {
      throw unprocessable(e.what());
    }
    s->status = s->episode.exhausted() ? SessionStatus::Exhausted : SessionStatus::Active;
    StepResult r = record_step(*s, std::nullopt);
    {
      std::lock_guard lock(mu_);
      s->id = new_id();
      sessions_[s->id] = s;
    }
    r.session_id = s->id;
    return r;
  }

  StepResult submit_answer(const std::string& id, const AnswerSubmission& sub) {
    auto s = acquire(id);
    Release release{*s};
    std::lock_guard op(s->op_mutex);
    if (s->status == SessionStatus::Closed) throw conflict("session " + id + " is closed");
    if (s->status == SessionStatus::Exhausted || s->episode.exhausted())
      throw conflict("session " + id + " has no questions left");
    const auto& model = s->checkpoint->model;
    AnswerColor<float> answer;
    std::string mode;
    if (sub.mode == AnswerMode::Custom) {
      if (!sub.color) throw bad_request("custom answers need a color");
      const auto enc = s->color_space.encode_color(*sub.color);
      answer.assign(enc.begin(), enc.end());
      mode = "custom";
    } else {
      const Tensor<float>* truth = s->ground_truth ? &*s->ground_truth : nullptr;
      std::optional<Tensor<float>> supplied;
      if (sub.ground_truth_png) {
        Raster8 gt;
        try {
          gt = decode_png(*sub.ground_truth_png);
        } catch (const ValidationError& e) {
          throw bad_request(std::string("ground_truth: ") + e.what());
        }
        const auto& mc = model.config();
        if (gt.width != mc.width || gt.height != mc.height)
          throw unprocessable("ground truth must be " + std::to_string(mc.width) + "x" + std::to_string(mc.height));
        supplied = to_model_space<float>(gt, s->color_space).target;
        truth = &*supplied;
      }
      if (!truth) throw bad_request("oracle answers need ground truth (none attached to the session)");
      answer = compute_answer(s->episode.current_question, *truth).color;
      if (config_.debug_noise.active()) answer = perturb_answer(answer, config_.debug_noise, s->noise_rng);
      mode = "oracle";
    }
    s->episode = advance(std::move(s->episode), model, std::optional<AnswerColor<float>>(answer));
    s->answer_modes.push_back(mode);
    s->last_activity = clock_();
    if (s->episode.exhausted()) s->status = SessionStatus::Exhausted;
    StepResult r = record_step(*s, answer);
    r.session_id = id;
    return r;
  }

  nlohmann::json get_session(const std::string& id) {
    std::shared_ptr<Session> s;
    {
      std::lock_guard lock(mu_);
      if (auto it = sessions_.find(id); it != sessions_.end()) {
        s = it->second;
        ++s->in_flight;
      } else if (config_.tombstones && tombstones_.count(id)) {
        return {{"session_id", id}, {"status", "closed"}};
      }
    }
    if (!s) throw not_found("unknown session " + id);
    Release release{*s};
    std::lock_guard op(s->op_mutex);
    s->last_activity = clock_();
    return describe(*s);
  }

  nlohmann::json close_session(const std::string& id) {
    std::shared_ptr<Session> s;
    {
      std::lock_guard lock(mu_);
      auto it = sessions_.find(id);
      if (it == sessions_.end()) throw not_found("unknown session " + id);
      s = it->second;
    }
    std::lock_guard op(s->op_mutex);
    s->status = SessionStatus::Closed;
    {
      std::lock_guard lock(mu_);
      sessions_.erase(id);
      if (config_.tombstones) tombstones_.insert(id);
    }
    drop_blobs(*s);
    return {{"session_id", id}, {"status", "closed"}};
  }

  nlohmann::json list_checkpoints() {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : registry_.list())
      arr.push_back({{"id", c.id}, {"model_config", c.model_config}, {"step_count", c.step_count},
                     {"train_config", c.train_config}});
    return arr;
  }

  // Removes sessions idle longer than the TTL. Sessions with a request in
  // progress are skipped.
  std::size_t reap_idle() {
    const auto now = clock_();
    const auto ttl = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(config_.session_ttl_seconds));
    std::vector<std::shared_ptr<Session>> dead;
    {
      std::lock_guard lock(mu_);
      for (auto it = sessions_.begin(); it != sessions_.end();) {
        auto& s = it->second;
        if (s->in_flight.load() == 0 && now - s->last_activity > ttl) {
          dead.push_back(s);
          it = sessions_.erase(it);
        } else {
          ++it;
        }
      }
    }
    for (auto& s : dead) {
      std::lock_guard op(s->op_mutex);
      s->status = SessionStatus::Closed;
      drop_blobs(*s);
    }
    return dead.size();
  }

  std::size_t session_count() const {
    std::lock_guard lock(mu_);
    return sessions_.size();
  }

  // Direct access for tests and offline comparison.
  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

 private:
  struct Release {
    Session& s;
    ~Release() { --s.in_flight; }
  };

  std::shared_ptr<Session> acquire(const std::string& id) {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) {
      if (tombstones_.count(id)) throw conflict("session " + id + " is closed");
      throw not_found("unknown session " + id);
    }
    ++it->second->in_flight;
    return it->second;
  }

  static Raster8 fit(Raster8 img, const ModelConfig& mc, bool resize, const char* what) {
    if (img.width == mc.width && img.height == mc.height) return img;
    if (!resize)
      throw unprocessable(std::string(what) + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          ", checkpoint expects " + std::to_string(mc.width) + "x" + std::to_string(mc.height) +
                          " (set resize to allow rescaling)");
    return center_crop_resize(img, mc.width, mc.height);
  }

  StepResult record_step(Session& s, std::optional<AnswerColor<float>> answer) {
    const auto& ep = s.episode;
    StepResult r;
    r.step = ep.step();
    r.exhausted = ep.exhausted();
    r.prediction_png = encode_png(from_model_space(ep.current_prediction, ep.input_x, s.color_space));
    r.prediction_blob = blobs_.put(r.prediction_png);
    auto q_png = encode_png(heatmap_raster(ep.current_question));
    r.question_blob = blobs_.put(q_png);
    if (!r.exhausted) r.question_png = std::move(q_png);
    r.question = ep.current_question;
    r.answer = std::move(answer);
    s.images.push_back({r.prediction_blob, r.question_blob});
    return r;
  }

  void drop_blobs(Session& s) {
    for (const auto& im : s.images) {
      blobs_.release(im.prediction_blob);
      blobs_.release(im.question_blob);
    }
    s.images.clear();
  }

  nlohmann::json describe(const Session& s) const {
    const auto& ep = s.episode;
    nlohmann::json preds = nlohmann::json::array(), questions = nlohmann::json::array(),
                   answers = nlohmann::json::array();
    for (std::size_t t = 0; t < s.images.size(); ++t) {
      preds.push_back({{"step", t}, {"blob", s.images[t].prediction_blob}});
      questions.push_back({{"step", t}, {"blob", s.images[t].question_blob}, {"values", question_values(ep.question_history[t])}});
    }
    for (std::size_t i = 0; i < ep.answer_history.size(); ++i) {
      const auto& a = ep.answer_history[i];
      answers.push_back({{"step", ep.answer_pass[i]},
                         {"mode", s.answer_modes[i]},
                         {"model_space", a},
                         {"display", display_color(s, a)}});
    }
    const auto age = [&](Clock::time_point t) { return std::chrono::duration<double>(clock_() - t).count(); };
    return {{"session_id", s.id},
            {"checkpoint_id", s.checkpoint_id},
            {"color_space", to_string(s.color_space.mode)},
            {"status", to_string(s.status)},
            {"step", ep.step()},
            {"forward_passes", ep.forward_passes},
            {"max_answers", ep.max_answers},
            {"exhausted", ep.exhausted()},
            {"has_ground_truth", s.ground_truth.has_value()},
            {"age_seconds", age(s.created_at)},
            {"idle_seconds", age(s.last_activity)},
            {"predictions", preds},
            {"questions", questions},
            {"answers", answers}};
  }

  // Display color of an answer at the image's mean lightness.
  static std::vector<int> display_color(const Session& s, const AnswerColor<float>& a) {
    double mean_in = 0;
    for (float v : s.episode.input_x.vec()) mean_in += v;
    mean_in /= static_cast<double>(s.episode.input_x.size());
    const Rgb8 c = s.color_space.decode_color(std::span<const float>(a), mean_in);
    return {c.r, c.g, c.b};
  }

  std::string new_id() {
    static const char* hex = "0123456789abcdef";
    std::string id;
    do {
      id.clear();
      for (int k = 0; k < 16; ++k) id.push_back(hex[id_rng_() & 15]);
    } while (sessions_.count(id) || tombstones_.count(id));
    return id;
  }

  ServiceConfig config_;
  std::function<Clock::time_point()> clock_;
  CheckpointRegistry registry_;
  BlobStore blobs_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::set<std::string> tombstones_;
  std::mt19937_64 id_rng_;

 public:
  static nlohmann::json question_values(const QuestionMap<float>& q) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < q.height(); ++i) {
      std::vector<float> row(static_cast<std::size_t>(q.width()));
      for (int j = 0; j < q.width(); ++j) row[j] = q(i, j);
      rows.push_back(row);
    }
    return rows;
  }
};

// Periodically reaps idle sessions until destroyed.
class Reaper {
 public:
  Reaper(SessionManager& mgr, double interval_seconds) : mgr_(mgr), interval_(interval_seconds) {
    thread_ = std::thread([this] { run(); });
  }
  ~Reaper() {
    {
      std::lock_guard l(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    thread_.join();
  }

 private:
  void run() {
    std::unique_lock l(mu_);
    while (!stop_) {
      cv_.wait_for(l, std::chrono::duration<double>(interval_), [&] { return stop_; });
      if (stop_) break;
      l.unlock();
      mgr_.reap_idle();
      l.lock();
    }
  }

  SessionManager& mgr_;
  double interval_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  std::thread thread_;
};

}  // namespace askpaint::service
