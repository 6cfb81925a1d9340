#pragma once

// HTTP+JSON routes over SessionManager. Images travel base64-embedded in JSON
// and are also served by content hash from /blobs/{hash}.

#include <memory>
#include <string>

#include <nlohmann/json.hpp>

// Eigen must precede httplib: <resolv.h> defines a `_res` macro.
#include "askpaint/service.hpp"

#include <httplib.h>

namespace askpaint::service {

inline nlohmann::json step_json(const StepResult& r) {
  nlohmann::json j = {{"session_id", r.session_id},
                      {"step", r.step},
                      {"exhausted", r.exhausted},
                      {"prediction", {{"png_base64", base64_encode(r.prediction_png)}, {"blob", r.prediction_blob}}}};
  if (r.question_png)
    j["question"] = {{"png_base64", base64_encode(*r.question_png)},
                     {"blob", r.question_blob},
                     {"values", SessionManager::question_values(r.question)}};
  else
    j["question"] = nullptr;
  j["answer"] = r.answer ? nlohmann::json(*r.answer) : nlohmann::json(nullptr);
  return j;
}

namespace detail {

inline nlohmann::json parse_body(const httplib::Request& req) {
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw bad_request("request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw bad_request(std::string("malformed JSON: ") + e.what());
  }
}

template <typename V>
V field(const nlohmann::json& j, const char* key, V fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw bad_request(std::string("field '") + key + "' has the wrong type");
  }
}

inline std::optional<std::vector<std::uint8_t>> image_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  if (!j.at(key).is_string()) throw bad_request(std::string("field '") + key + "' must be a base64 string");
  return base64_decode(j.at(key).get<std::string>());
}

inline CreateOptions create_options(const nlohmann::json& j) {
  CreateOptions o;
  o.checkpoint_id = field<std::string>(j, "checkpoint_id", "");
  if (o.checkpoint_id.empty()) throw bad_request("checkpoint_id is required");
  if (const auto cs = field<std::string>(j, "color_space", ""); !cs.empty()) {
    try {
      o.color_space = parse_color_mode(cs);
    } catch (const ValidationError& e) {
      throw bad_request(e.what());
    }
  }
  o.max_answers = field<int>(j, "max_answers", -1);
  if (j.contains("max_answers") && o.max_answers < 0) throw bad_request("max_answers must be >= 0");
  o.ground_truth_png = image_field(j, "ground_truth");
  o.image_is_ground_truth = field<bool>(j, "image_is_ground_truth", false);
  o.resize = field<bool>(j, "resize", false);
  return o;
}

inline AnswerSubmission submission(const nlohmann::json& j) {
  AnswerSubmission s;
  const auto mode = field<std::string>(j, "mode", "");
  if (mode == "custom") {
    s.mode = AnswerMode::Custom;
    if (!j.contains("color")) throw bad_request("custom answers need a color");
    if (j.contains("ground_truth")) throw bad_request("custom answers take no ground_truth");
    const auto& c = j.at("color");
    if (!c.is_array() || c.size() != 3) throw bad_request("color must be [r, g, b]");
    int v[3];
    for (int k = 0; k < 3; ++k) {
      if (!c[k].is_number_integer() || c[k].get<int>() < 0 || c[k].get<int>() > 255)
        throw bad_request("color components must be integers in [0, 255]");
      v[k] = c[k].get<int>();
    }
    s.color = Rgb8{static_cast<std::uint8_t>(v[0]), static_cast<std::uint8_t>(v[1]), static_cast<std::uint8_t>(v[2])};
  } else if (mode == "oracle") {
    s.mode = AnswerMode::Oracle;
    if (j.contains("color")) throw bad_request("oracle answers take no color");
    s.ground_truth_png = image_field(j, "ground_truth");
  } else {
    throw bad_request("mode must be 'custom' or 'oracle'");
  }
  return s;
}

inline void send_json(httplib::Response& res, int status, const nlohmann::json& j) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const ServiceError& e) {
    send_json(res, e.status(), {{"error", e.what()}, {"status", e.status()}});
  } catch (const ValidationError& e) {
    send_json(res, 400, {{"error", e.what()}, {"status", 400}});
  } catch (const StateError& e) {
    send_json(res, 409, {{"error", e.what()}, {"status", 409}});
  } catch (const CheckpointError& e) {
    send_json(res, 500, {{"error", e.what()}, {"status", 500}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", e.what()}, {"status", 500}});
  }
}

}  // namespace detail

inline void install_routes(httplib::Server& server, SessionManager& mgr) {
  using detail::guarded;
  using detail::send_json;

  server.Get("/healthz", [&mgr](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"sessions", mgr.session_count()}});
  });

  server.Get("/checkpoints", [&mgr](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, {{"checkpoints", mgr.list_checkpoints()}}); });
  });

  server.Post("/sessions", [&mgr](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = detail::parse_body(req);
      const auto image = detail::image_field(body, "image");
      if (!image) throw bad_request("image is required");
      send_json(res, 201, step_json(mgr.create_session(*image, detail::create_options(body))));
    });
  });

  server.Post(R"(/sessions/([0-9a-f]+)/answers)", [&mgr](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto sub = detail::submission(detail::parse_body(req));
      send_json(res, 200, step_json(mgr.submit_answer(req.matches[1], sub)));
    });
  });

  server.Get(R"(/sessions/([0-9a-f]+))", [&mgr](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, mgr.get_session(req.matches[1])); });
  });

  server.Delete(R"(/sessions/([0-9a-f]+))", [&mgr](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, mgr.close_session(req.matches[1])); });
  });

  server.Get(R"(/blobs/([0-9a-f]{64}))", [&mgr](const httplib::Request& req, httplib::Response& res) {
    const auto blob = mgr.blobs().get(req.matches[1]);
    if (!blob) return send_json(res, 404, {{"error", "unknown blob"}, {"status", 404}});
    res.set_content(std::string(blob->begin(), blob->end()), "image/png");
  });

  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_json(res, res.status, {{"error", "no such route"}, {"status", res.status}});
  });
}

}  // namespace askpaint::service
