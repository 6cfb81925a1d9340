#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "askpaint/service_http.hpp"
#include "test_util.hpp"

using namespace askpaint;
using namespace askpaint::service;
using askpaint::testing::TempDir;
using askpaint::testing::tiny_config;

namespace {

struct ManualClock {
  Clock::time_point now{};
  void advance(double seconds) {
    now += std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(seconds));
  }
};

struct Fixture {
  TempDir dir{"svc"};
  ManualClock clock;
  std::unique_ptr<SessionManager> mgr;

  explicit Fixture(ServiceConfig cfg = {}) {
    cfg.checkpoint_dir = dir.path();
    cfg.session_ttl_seconds = 60;
    save_checkpoint(Checkpoint<float>{kCheckpointVersion, build_model<float>(tiny_config()), {{"max_answers", 3}}, 9},
                    dir.path() / "toy.ckpt");
    mgr = std::make_unique<SessionManager>(cfg, [this] { return clock.now; });
  }
};

std::vector<std::uint8_t> scene_png(std::uint64_t seed, int size = 8) {
  Raster8 r(size, size, 3);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& p : r.pixels) p = static_cast<std::uint8_t>(d(rng));
  return encode_png(r);
}

CreateOptions opts(bool with_truth = true) {
  CreateOptions o;
  o.checkpoint_id = "toy";
  o.image_is_ground_truth = with_truth;
  return o;
}

AnswerSubmission custom(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return {AnswerMode::Custom, Rgb8{r, g, b}, std::nullopt};
}

AnswerSubmission oracle() { return {AnswerMode::Oracle, std::nullopt, std::nullopt}; }

template <typename F>
int status_of(F&& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status();
  }
  return 0;
}

}  // namespace

TEST(Encoding, Base64RoundTrip) {
  for (std::size_t n : {0, 1, 2, 3, 4, 5, 100}) {
    std::vector<std::uint8_t> b(n);
    for (std::size_t k = 0; k < n; ++k) b[k] = static_cast<std::uint8_t>(k * 37 + 1);
    EXPECT_EQ(base64_decode(base64_encode(b)), b) << n;
  }
  EXPECT_EQ(base64_encode({'f', 'o', 'o'}), "Zm9v");
  EXPECT_EQ(status_of([] { base64_decode("abc"); }), 400);
}

TEST(Encoding, Sha256) {
  EXPECT_EQ(sha256_hex({'a', 'b', 'c'}), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(BlobStore, RefCounting) {
  BlobStore store;
  const auto h = store.put({1, 2, 3});
  EXPECT_EQ(store.put({1, 2, 3}), h);
  store.release(h);
  EXPECT_TRUE(store.get(h).has_value());
  store.release(h);
  EXPECT_FALSE(store.get(h).has_value());
}

TEST(SessionManager, CreateReturnsPassZero) {
  Fixture f;
  const auto r = f.mgr->create_session(scene_png(1), opts());
  EXPECT_FALSE(r.session_id.empty());
  EXPECT_EQ(r.step, 0);
  EXPECT_FALSE(r.exhausted);
  EXPECT_TRUE(r.question_png.has_value());
  EXPECT_EQ(decode_png(r.prediction_png).width, 8);
  EXPECT_EQ(f.mgr->blobs().get(r.prediction_blob), r.prediction_png);
}

TEST(SessionManager, CorruptImageCreatesNothing) {
  Fixture f;
  EXPECT_EQ(status_of([&] { f.mgr->create_session({1, 2, 3}, opts()); }), 400);
  EXPECT_EQ(f.mgr->session_count(), 0u);
}

TEST(SessionManager, UnknownCheckpoint) {
  Fixture f;
  auto o = opts();
  o.checkpoint_id = "nope";
  EXPECT_EQ(status_of([&] { f.mgr->create_session(scene_png(1), o); }), 404);
  o.checkpoint_id = "../toy";
  EXPECT_EQ(status_of([&] { f.mgr->create_session(scene_png(1), o); }), 404);
}

TEST(SessionManager, SizeMismatchNeedsConsent) {
  Fixture f;
  EXPECT_EQ(status_of([&] { f.mgr->create_session(scene_png(1, 16), opts()); }), 422);
  auto o = opts();
  o.resize = true;
  EXPECT_EQ(f.mgr->create_session(scene_png(1, 16), o).step, 0);
}

TEST(SessionManager, ColorSpaceMismatch) {
  Fixture f;
  auto o = opts();
  o.color_space = ColorMode::Rgb;
  EXPECT_EQ(status_of([&] { f.mgr->create_session(scene_png(1), o); }), 422);
}

TEST(SessionManager, ZeroAnswersIsExhausted) {
  Fixture f;
  auto o = opts();
  o.max_answers = 0;
  const auto r = f.mgr->create_session(scene_png(1), o);
  EXPECT_TRUE(r.exhausted);
  EXPECT_FALSE(r.question_png.has_value());
  EXPECT_EQ(status_of([&] { f.mgr->submit_answer(r.session_id, custom(255, 0, 0)); }), 409);
}

TEST(SessionManager, MaxAnswersDefaultsToCheckpoint) {
  Fixture f;
  const auto id = f.mgr->create_session(scene_png(1), opts()).session_id;
  EXPECT_EQ(f.mgr->get_session(id)["max_answers"], 3);
}

TEST(SessionManager, CustomAnswerIsEncodedColor) {
  Fixture f;
  const auto id = f.mgr->create_session(scene_png(2), opts()).session_id;
  const auto r = f.mgr->submit_answer(id, custom(200, 30, 40));
  const auto enc = ColorSpaceSpec{}.encode_color(Rgb8{200, 30, 40});
  ASSERT_TRUE(r.answer.has_value());
  EXPECT_EQ(*r.answer, AnswerColor<float>(enc.begin(), enc.end()));
  EXPECT_EQ(r.step, 1);
}

TEST(SessionManager, OracleAnswerMatchesComputeAnswer) {
  Fixture f;
  const auto png = scene_png(3);
  const auto first = f.mgr->create_session(png, opts());
  const auto truth = to_model_space<float>(decode_png(png), ColorSpaceSpec{}).target;
  const auto r = f.mgr->submit_answer(first.session_id, oracle());
  EXPECT_EQ(*r.answer, compute_answer(first.question, truth).color);
}

TEST(SessionManager, OracleWithoutTruthIsBadRequest) {
  Fixture f;
  const auto id = f.mgr->create_session(scene_png(3), opts(false)).session_id;
  EXPECT_EQ(status_of([&] { f.mgr->submit_answer(id, oracle()); }), 400);
  EXPECT_EQ(status_of([&] { f.mgr->submit_answer(id, {AnswerMode::Custom, std::nullopt, std::nullopt}); }), 400);
  auto sub = oracle();
  sub.ground_truth_png = scene_png(4, 16);
  EXPECT_EQ(status_of([&] { f.mgr->submit_answer(id, sub); }), 422);
  sub.ground_truth_png = scene_png(4);
  EXPECT_EQ(f.mgr->submit_answer(id, sub).step, 1);
}

TEST(SessionManager, HistoryLengths) {
  Fixture f;
  const auto id = f.mgr->create_session(scene_png(5), opts()).session_id;
  f.mgr->submit_answer(id, custom(255, 0, 0));
  f.mgr->submit_answer(id, oracle());
  const auto j = f.mgr->get_session(id);
  EXPECT_EQ(j["predictions"].size(), 3u);
  EXPECT_EQ(j["questions"].size(), 3u);
  EXPECT_EQ(j["answers"].size(), 2u);
  EXPECT_EQ(j["answers"][0]["mode"], "custom");
  EXPECT_EQ(j["answers"][1]["mode"], "oracle");
  EXPECT_EQ(j["questions"][0]["values"].size(), 8u);
  EXPECT_EQ(j["step"], 2);
}

TEST(SessionManager, ExhaustionAndClose) {
  Fixture f;
  const auto id = f.mgr->create_session(scene_png(6), opts()).session_id;
  for (int k = 0; k < 3; ++k) {
    const auto r = f.mgr->submit_answer(id, custom(10, 200, 10));
    EXPECT_EQ(r.exhausted, k == 2);
    EXPECT_EQ(r.question_png.has_value(), k != 2);
  }
  EXPECT_EQ(status_of([&] { f.mgr->submit_answer(id, custom(1, 2, 3)); }), 409);
  EXPECT_EQ(f.mgr->get_session(id)["status"], "exhausted");
  f.mgr->close_session(id);
  EXPECT_EQ(status_of([&] { f.mgr->get_session(id); }), 404);
  EXPECT_EQ(status_of([&] { f.mgr->submit_answer(id, custom(1, 2, 3)); }), 404);
  EXPECT_EQ(f.mgr->blobs().size(), 0u);
}

TEST(SessionManager, TombstonesWhenConfigured) {
  ServiceConfig cfg;
  cfg.tombstones = true;
  Fixture f(cfg);
  const auto id = f.mgr->create_session(scene_png(6), opts()).session_id;
  f.mgr->close_session(id);
  EXPECT_EQ(f.mgr->get_session(id)["status"], "closed");
  EXPECT_EQ(status_of([&] { f.mgr->submit_answer(id, custom(1, 2, 3)); }), 409);
}

TEST(SessionManager, ListCheckpoints) {
  Fixture f;
  const auto list = f.mgr->list_checkpoints();
  ASSERT_EQ(list.size(), 1u);
  EXPECT_EQ(list[0]["id"], "toy");
  EXPECT_EQ(list[0]["step_count"], 9);
}

TEST(SessionManager, HistoryMatchesOfflineRollout) {
  Fixture f;
  const auto png = scene_png(7);
  const auto id = f.mgr->create_session(png, opts()).session_id;
  f.mgr->submit_answer(id, custom(250, 20, 20));
  f.mgr->submit_answer(id, oracle());
  f.mgr->submit_answer(id, custom(20, 20, 250));
  const auto session = f.mgr->find(id);
  const auto model = load_checkpoint<float>(f.dir.path() / "toy.ckpt").model;
  const auto ms = to_model_space<float>(decode_png(png), ColorSpaceSpec{});
  auto s = advance(init_episode(ms.input, 3, 2), model, std::optional<AnswerColor<float>>());
  for (const auto& a : session->episode.answer_history) s = advance(s, model, std::optional<AnswerColor<float>>(a));
  EXPECT_EQ(session->episode.answer_history[1], compute_answer(s.question_history[1], ms.target).color);
  ASSERT_EQ(s.prediction_history.size(), session->episode.prediction_history.size());
  for (std::size_t t = 0; t < s.prediction_history.size(); ++t) {
    EXPECT_EQ(s.prediction_history[t], session->episode.prediction_history[t]);
    EXPECT_EQ(s.question_history[t], session->episode.question_history[t]);
  }
}

TEST(SessionManager, TtlReaping) {
  Fixture f;
  const auto a = f.mgr->create_session(scene_png(8), opts()).session_id;
  f.clock.advance(40);
  const auto b = f.mgr->create_session(scene_png(9), opts()).session_id;
  f.clock.advance(30);
  EXPECT_EQ(f.mgr->reap_idle(), 1u);
  EXPECT_EQ(f.mgr->find(a), nullptr);
  ASSERT_NE(f.mgr->find(b), nullptr);
  f.mgr->submit_answer(b, custom(1, 2, 3));
  f.clock.advance(50);
  EXPECT_EQ(f.mgr->reap_idle(), 0u);
  EXPECT_EQ(f.mgr->get_session(b)["step"], 1);
}

TEST(SessionManagerConcurrency, DistinctSessionsDoNotInterleave) {
  Fixture f;
  std::vector<std::string> ids;
  for (int k = 0; k < 4; ++k) ids.push_back(f.mgr->create_session(scene_png(10 + k), opts()).session_id);
  std::vector<std::thread> threads;
  for (int k = 0; k < 4; ++k)
    threads.emplace_back([&, k] {
      for (int n = 0; n < 3; ++n) f.mgr->submit_answer(ids[k], custom(std::uint8_t(60 * k), std::uint8_t(40 * n), 90));
    });
  for (auto& t : threads) t.join();
  for (int k = 0; k < 4; ++k) {
    const auto s = f.mgr->find(ids[k]);
    const auto model = s->checkpoint->model;
    auto offline = advance(init_episode(s->episode.input_x, 3, 2), model, std::optional<AnswerColor<float>>());
    for (int n = 0; n < 3; ++n) {
      const auto enc = ColorSpaceSpec{}.encode_color(Rgb8{std::uint8_t(60 * k), std::uint8_t(40 * n), 90});
      offline = advance(offline, model, std::optional<AnswerColor<float>>(AnswerColor<float>(enc.begin(), enc.end())));
    }
    EXPECT_EQ(offline.current_prediction, s->episode.current_prediction) << k;
  }
}

TEST(SessionManagerConcurrency, OneSessionNoLostUpdates) {
  Fixture f;
  auto o = opts();
  o.max_answers = 8;
  const auto id = f.mgr->create_session(scene_png(20), o).session_id;
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int k = 0; k < 8; ++k)
    threads.emplace_back([&] {
      f.mgr->submit_answer(id, custom(100, 100, 100));
      ++ok;
    });
  for (auto& t : threads) t.join();
  EXPECT_EQ(ok.load(), 8);
  const auto j = f.mgr->get_session(id);
  EXPECT_EQ(j["step"], 8);
  EXPECT_EQ(j["answers"].size(), 8u);
  EXPECT_TRUE(j["exhausted"].get<bool>());
}

TEST(ServiceConfig, EnvironmentOverrides) {
  ServiceConfig c;
  setenv("ASKPAINT_PORT", "9123", 1);
  setenv("ASKPAINT_SESSION_TTL", "12.5", 1);
  setenv("ASKPAINT_CHECKPOINT_DIR", "/tmp/ck", 1);
  apply_environment(c);
  unsetenv("ASKPAINT_PORT");
  unsetenv("ASKPAINT_SESSION_TTL");
  unsetenv("ASKPAINT_CHECKPOINT_DIR");
  EXPECT_EQ(c.port, 9123);
  EXPECT_EQ(c.session_ttl_seconds, 12.5);
  EXPECT_EQ(c.checkpoint_dir, "/tmp/ck");
}

class HttpApi : public ::testing::Test {
 protected:
  void SetUp() override {
    install_routes(server_, *f_.mgr);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }

  httplib::Result post(const std::string& path, const nlohmann::json& body) {
    return client().Post(path, body.dump(), "application/json");
  }
  httplib::Client client() { return httplib::Client("127.0.0.1", port_); }

  Fixture f_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

TEST_F(HttpApi, FullEpisode) {
  auto c = client();
  auto health = c.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);

  auto ck = c.Get("/checkpoints");
  ASSERT_TRUE(ck);
  EXPECT_EQ(nlohmann::json::parse(ck->body)["checkpoints"][0]["id"], "toy");

  auto created = post("/sessions", {{"image", base64_encode(scene_png(30))}, {"checkpoint_id", "toy"},
                                    {"image_is_ground_truth", true}});
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 201) << created->body;
  const auto cj = nlohmann::json::parse(created->body);
  const std::string id = cj["session_id"];
  EXPECT_EQ(cj["step"], 0);
  EXPECT_EQ(decode_png(base64_decode(cj["prediction"]["png_base64"])).width, 8);

  auto blob = c.Get("/blobs/" + cj["question"]["blob"].get<std::string>());
  ASSERT_TRUE(blob);
  EXPECT_EQ(blob->status, 200);
  EXPECT_EQ(blob->get_header_value("Content-Type"), "image/png");

  auto a1 = post("/sessions/" + id + "/answers", {{"mode", "custom"}, {"color", {255, 0, 0}}});
  ASSERT_TRUE(a1);
  EXPECT_EQ(a1->status, 200) << a1->body;
  auto a2 = post("/sessions/" + id + "/answers", {{"mode", "oracle"}});
  ASSERT_TRUE(a2);
  EXPECT_EQ(nlohmann::json::parse(a2->body)["step"], 2);

  auto got = c.Get("/sessions/" + id);
  ASSERT_TRUE(got);
  EXPECT_EQ(nlohmann::json::parse(got->body)["answers"].size(), 2u);

  auto del = c.Delete("/sessions/" + id);
  ASSERT_TRUE(del);
  EXPECT_EQ(del->status, 200);
  auto gone = c.Get("/sessions/" + id);
  ASSERT_TRUE(gone);
  EXPECT_EQ(gone->status, 404);
}

TEST_F(HttpApi, ErrorStatuses) {
  auto c = client();
  EXPECT_EQ(c.Post("/sessions", "not json", "application/json")->status, 400);
  EXPECT_EQ(post("/sessions", {{"checkpoint_id", "toy"}})->status, 400);
  EXPECT_EQ(post("/sessions", {{"image", base64_encode({1, 2, 3, 4})}, {"checkpoint_id", "toy"}})->status, 400);
  EXPECT_EQ(post("/sessions", {{"image", base64_encode(scene_png(1))}, {"checkpoint_id", "missing"}})->status, 404);
  EXPECT_EQ(post("/sessions", {{"image", base64_encode(scene_png(1, 16))}, {"checkpoint_id", "toy"}})->status, 422);
  const auto id = nlohmann::json::parse(
                      post("/sessions", {{"image", base64_encode(scene_png(1))}, {"checkpoint_id", "toy"}})->body)["session_id"]
                      .get<std::string>();
  EXPECT_EQ(post("/sessions/" + id + "/answers", {{"mode", "custom"}})->status, 400);
  EXPECT_EQ(post("/sessions/" + id + "/answers", {{"mode", "custom"}, {"color", {300, 0, 0}}})->status, 400);
  EXPECT_EQ(post("/sessions/" + id + "/answers", {{"mode", "oracle"}, {"color", {1, 0, 0}}})->status, 400);
  EXPECT_EQ(post("/sessions/" + id + "/answers", {{"mode", "paint"}})->status, 400);
  EXPECT_EQ(post("/sessions/" + id + "/answers", {{"mode", "oracle"}})->status, 400);
  EXPECT_EQ(post("/sessions/abc123/answers", {{"mode", "custom"}, {"color", {1, 2, 3}}})->status, 404);
  EXPECT_EQ(c.Get("/blobs/" + std::string(64, '0'))->status, 404);
  EXPECT_EQ(c.Get("/nowhere")->status, 404);
}
