#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "dofkit/dataset.hpp"
#include "dofkit/io.hpp"
#include "dofkit/lens_fit.hpp"
#include "dofkit/render.hpp"
#include "dofkit/serialize.hpp"

namespace dofkit {

struct SceneImage {
  std::string source;
  DisplayImage color;
  DepthMap depth;
  std::optional<LensParams> fitted;
};

// Immutable after load. All images share one disparity range so a focus value
// means the same depth across views.
struct LoadedScene {
  std::string id;
  DisparityRange range;
  CoCProfile profile;
  GammaSpec gamma;
  std::vector<SceneImage> images;
};

struct ServiceResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;

  static ServiceResponse json(const Json& doc, int status = 200) {
    return {status, "application/json", doc.dump() + "\n"};
  }
  static ServiceResponse error(int status, const std::string& message) {
    return json(Json{{"error", message}}, status);
  }
};

// A request that failed validation; carries the HTTP status to report.
class RequestError : public std::runtime_error {
 public:
  RequestError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

struct RenderRequest {
  std::size_t image_index = 0;
  double aperture = 0.0;
  std::optional<double> focus;
  std::optional<std::pair<int, int>> focus_pixel;
  CocShape shape = CocShape::circle;
  bool adaptation = false;
};

// Request handling independent of the transport; the HTTP layer only routes.
class Service {
 public:
  explicit Service(unsigned render_threads = 0) : threads_(render_threads) {}

  ServiceResponse load_scene(const std::string& body) {
    return guarded([&] {
      const auto doc = parse_body(body);
      auto scene = std::make_shared<LoadedScene>(build_scene(doc));
      std::unique_lock lock(mutex_);
      scene->id = "scene-" + std::to_string(++next_id_);
      scenes_[scene->id] = scene;
      return ServiceResponse::json(describe(*scene), 201);
    });
  }

  ServiceResponse get_scene(const std::string& id) const {
    return guarded([&] { return ServiceResponse::json(describe(*find(id))); });
  }

  ServiceResponse render(const std::string& id, const std::string& body) const {
    return guarded([&] {
      const auto scene = find(id);
      const auto req = parse_render_request(parse_body(body), *scene);
      return ServiceResponse{200, "image/png", to_string_bytes(render_png(*scene, req))};
    });
  }

  // Depth and normalized disparity at a pixel: the focus value that puts this
  // pixel in focus.
  ServiceResponse depth(const std::string& id, const std::map<std::string, std::string>& query) const {
    return guarded([&] {
      const auto scene = find(id);
      const auto index = query_index(query, *scene);
      const auto& img = scene->images[index];
      const int x = query_int(query, "x");
      const int y = query_int(query, "y");
      check_pixel(img, x, y);
      const double d = img.depth.at(x, y);
      return ServiceResponse::json({{"image_index", index}, {"x", x}, {"y", y}, {"depth", d},
                                    {"disparity", scene->range.normalize(d)}});
    });
  }

  // CoC radius (px) the renderer assigns to a pixel for the given lens.
  ServiceResponse coc(const std::string& id, const std::map<std::string, std::string>& query) const {
    return guarded([&] {
      const auto scene = find(id);
      const auto index = query_index(query, *scene);
      const auto& img = scene->images[index];
      const int x = query_int(query, "x");
      const int y = query_int(query, "y");
      check_pixel(img, x, y);
      const LensParams lens{query_double(query, "aperture"), query_double(query, "focus")};
      validate_lens(lens);
      const double r = coc_radius(lens, img.depth.at(x, y), scene->range,
                                  aperture_px_scale(img.depth.width(), img.depth.height()));
      return ServiceResponse::json({{"image_index", index}, {"x", x}, {"y", y}, {"radius", r}});
    });
  }

  // Linear interpolation of (aperture, focus) between keyframes; one frame per
  // integer frame index from the first to the last keyframe.
  ServiceResponse keyframes(const std::string& id, const std::string& body) const {
    return guarded([&] {
      const auto scene = find(id);
      const auto doc = parse_body(body);
      detail::reject_unknown(doc, {"image_index", "shape", "keyframes"});
      RenderRequest base;
      base.image_index = body_index(doc, *scene);
      if (doc.contains("shape")) base.shape = body_shape(doc);
      const auto& keys = doc.contains("keyframes") ? doc.at("keyframes") : Json();
      if (!keys.is_array() || keys.size() < 2) throw RequestError(422, "keyframes: need at least 2 entries");
      struct Key {
        int frame;
        double aperture;
        double focus;
      };
      std::vector<Key> ks;
      for (const auto& k : keys) {
        if (!k.is_object()) throw RequestError(422, "keyframes: entries must be objects");
        detail::reject_unknown(k, {"frame", "aperture", "focus"});
        Key key{detail::json_int(k, "frame"), detail::json_number(k, "aperture"), detail::json_number(k, "focus")};
        validate_lens({key.aperture, key.focus});
        if (key.frame < 0) throw RequestError(422, "keyframes.frame: must be >= 0");
        if (!ks.empty() && key.frame <= ks.back().frame) {
          throw RequestError(422, "keyframes.frame: must be strictly increasing");
        }
        ks.push_back(key);
      }
      if (ks.back().frame - ks.front().frame + 1 > kMaxFrames) {
        throw RequestError(422, "keyframes: at most " + std::to_string(kMaxFrames) + " frames");
      }
      Json frames = Json::array();
      std::size_t seg = 0;
      for (int f = ks.front().frame; f <= ks.back().frame; ++f) {
        while (f > ks[seg + 1].frame) ++seg;
        const auto& a = ks[seg];
        const auto& b = ks[seg + 1];
        // (1 - t) a + t b reproduces both endpoints exactly.
        const double t = static_cast<double>(f - a.frame) / (b.frame - a.frame);
        RenderRequest req = base;
        req.aperture = (1.0 - t) * a.aperture + t * b.aperture;
        req.focus = (1.0 - t) * a.focus + t * b.focus;
        const auto png = render_png(*scene, req);
        frames.push_back({{"frame", f}, {"aperture", req.aperture}, {"focus", *req.focus},
                          {"png", httplib::detail::base64_encode(to_string_bytes(png))}});
      }
      return ServiceResponse::json({{"image_index", base.image_index}, {"frames", std::move(frames)}});
    });
  }

  static constexpr int kMaxFrames = 600;

 private:
  template <typename F>
  static ServiceResponse guarded(F&& handler) {
    try {
      return handler();
    } catch (const RequestError& e) {
      return ServiceResponse::error(e.status(), e.what());
    } catch (const ConfigError& e) {
      return ServiceResponse::error(422, e.what());
    } catch (const Json::exception& e) {
      return ServiceResponse::error(422, e.what());
    } catch (const IoError& e) {
      return ServiceResponse::error(422, e.what());
    } catch (const std::invalid_argument& e) {
      return ServiceResponse::error(422, e.what());
    } catch (const std::domain_error& e) {
      return ServiceResponse::error(422, e.what());
    } catch (const std::exception& e) {
      return ServiceResponse::error(500, e.what());
    }
  }

  static Json parse_body(const std::string& body) {
    Json doc;
    try {
      doc = Json::parse(body);
    } catch (const Json::parse_error& e) {
      throw RequestError(422, std::string("malformed JSON: ") + e.what());
    }
    if (!doc.is_object()) throw RequestError(422, "request body must be a JSON object");
    return doc;
  }

  static std::string to_string_bytes(const Bytes& b) { return std::string(b.begin(), b.end()); }

  static void validate_lens(const LensParams& lens) {
    try {
      lens.validate();
    } catch (const std::domain_error& e) {
      throw RequestError(422, e.what());
    }
  }

  static void check_pixel(const SceneImage& img, int x, int y) {
    if (x < 0 || y < 0 || x >= img.depth.width() || y >= img.depth.height()) {
      throw RequestError(400, "pixel (" + std::to_string(x) + ", " + std::to_string(y) + ") outside the image");
    }
  }

  static std::size_t body_index(const Json& doc, const LoadedScene& scene) {
    if (!doc.contains("image_index")) return 0;
    const int i = detail::json_int(doc, "image_index");
    if (i < 0 || static_cast<std::size_t>(i) >= scene.images.size()) {
      throw RequestError(422, "image_index: out of range");
    }
    return static_cast<std::size_t>(i);
  }

  static CocShape body_shape(const Json& doc) {
    try {
      return parse_shape(detail::json_string(doc, "shape"));
    } catch (const std::invalid_argument& e) {
      throw RequestError(422, std::string("shape: ") + e.what());
    }
  }

  static const std::string& query_value(const std::map<std::string, std::string>& q, const std::string& key) {
    const auto it = q.find(key);
    if (it == q.end()) throw RequestError(422, "missing query parameter '" + key + "'");
    return it->second;
  }

  static int query_int(const std::map<std::string, std::string>& q, const std::string& key) {
    const auto& s = query_value(q, key);
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw RequestError(422, key + ": expected an integer");
    return v;
  }

  static double query_double(const std::map<std::string, std::string>& q, const std::string& key) {
    const auto& s = query_value(q, key);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw RequestError(422, key + ": expected a number");
    return v;
  }

  static std::size_t query_index(const std::map<std::string, std::string>& q, const LoadedScene& scene) {
    if (!q.contains("image")) return 0;
    const int i = query_int(q, "image");
    if (i < 0 || static_cast<std::size_t>(i) >= scene.images.size()) throw RequestError(422, "image: out of range");
    return static_cast<std::size_t>(i);
  }

  static RenderRequest parse_render_request(const Json& doc, const LoadedScene& scene) {
    detail::reject_unknown(doc, {"image_index", "aperture", "focus", "focus_pixel", "shape", "adaptation"});
    RenderRequest req;
    req.image_index = body_index(doc, scene);
    req.aperture = detail::json_number(doc, "aperture");
    if (doc.contains("focus") == doc.contains("focus_pixel")) {
      throw RequestError(422, "exactly one of 'focus' and 'focus_pixel' is required");
    }
    if (doc.contains("focus")) {
      req.focus = detail::json_number(doc, "focus");
    } else {
      const auto& p = doc.at("focus_pixel");
      if (!p.is_object()) throw RequestError(422, "focus_pixel: expected {\"x\", \"y\"}");
      detail::reject_unknown(p, {"x", "y"});
      req.focus_pixel = std::pair{detail::json_int(p, "x"), detail::json_int(p, "y")};
      check_pixel(scene.images[req.image_index], req.focus_pixel->first, req.focus_pixel->second);
    }
    if (doc.contains("shape")) req.shape = body_shape(doc);
    if (doc.contains("adaptation")) req.adaptation = detail::json_bool(doc, "adaptation");
    return req;
  }

  Bytes render_png(const LoadedScene& scene, const RenderRequest& req) const {
    const auto& img = scene.images.at(req.image_index);
    const double focus = req.focus ? *req.focus
                                   : scene.range.normalize(img.depth.at(req.focus_pixel->first,
                                                                        req.focus_pixel->second));
    const LensParams lens{req.aperture, focus};
    validate_lens(lens);
    CoCProfile profile = scene.profile;
    profile.shape = req.shape;
    RenderOptions opts;
    opts.threads = threads_;
    opts.disparity_range = scene.range;
    std::vector<double> psi;
    if (req.adaptation) {
      // Post-threshold reweighting: shrink the aperture away from the focal plane.
      const FitConfig cfg;
      psi = adaptation_weight(focus_offset(normalized_disparity(img.depth, scene.range), focus),
                              cfg.adaptation_threshold(), cfg);
      opts.aperture_scale = psi;
    }
    return encode_png_rgb(render_defocus(img.color, img.depth, lens, profile, scene.gamma, opts).image);
  }

  static LoadedScene build_scene(const Json& doc) {
    detail::reject_unknown(doc, {"images", "manifest", "depth_range", "alpha", "gamma"});
    if (doc.contains("images") == doc.contains("manifest")) {
      throw RequestError(422, "exactly one of 'images' and 'manifest' is required");
    }
    LoadedScene scene;
    std::optional<DepthEncoding> png_range;
    if (doc.contains("depth_range")) {
      const auto& r = doc.at("depth_range");
      png_range = DepthEncoding{detail::json_number(r, "near"), detail::json_number(r, "far")};
    }
    if (doc.contains("manifest")) {
      const fs::path path = detail::json_string(doc, "manifest");
      const auto m = read_manifest(path);
      const auto root = path.parent_path();
      scene.range = m.disparity_range;
      scene.profile = m.profile;
      scene.gamma = m.gamma;
      std::vector<std::string> seen;
      for (const auto& e : m.entries) {
        if (std::find(seen.begin(), seen.end(), e.source) != seen.end()) continue;
        seen.push_back(e.source);
        scene.images.push_back({e.source, read_png(root / e.source), read_pfm(root / e.depth), std::nullopt});
      }
    } else {
      const auto& list = doc.at("images");
      if (!list.is_array() || list.empty()) throw RequestError(422, "images: expected a non-empty array");
      for (const auto& item : list) {
        if (!item.is_object()) throw RequestError(422, "images: entries must be objects");
        detail::reject_unknown(item, {"image", "depth", "fitted"});
        const auto image_path = detail::json_string(item, "image");
        SceneImage img{image_path, read_png(image_path),
                       read_depth(detail::json_string(item, "depth"), png_range), std::nullopt};
        if (item.contains("fitted")) img.fitted = lens_from_json(item.at("fitted"));
        require_same_dims(img.color, img.depth, "images");
        scene.images.push_back(std::move(img));
      }
      double near = scene.images.front().depth.min_depth();
      double far = scene.images.front().depth.max_depth();
      for (const auto& img : scene.images) {
        near = std::min(near, img.depth.min_depth());
        far = std::max(far, img.depth.max_depth());
      }
      scene.range = {near, far};
    }
    if (doc.contains("alpha")) scene.profile.alpha = detail::json_number(doc, "alpha");
    if (doc.contains("gamma")) scene.gamma.gamma = detail::json_number(doc, "gamma");
    detail::check_field("alpha", [&] { scene.profile.validate(); });
    detail::check_field("gamma", [&] { scene.gamma.validate(); });
    return scene;
  }

  static Json describe(const LoadedScene& scene) {
    Json images = Json::array();
    for (std::size_t i = 0; i < scene.images.size(); ++i) {
      const auto& img = scene.images[i];
      Json item{{"index", i}, {"source", img.source}, {"width", img.color.width()},
                {"height", img.color.height()}, {"depth_min", img.depth.min_depth()},
                {"depth_max", img.depth.max_depth()}};
      if (img.fitted) item["fitted"] = lens_to_json(*img.fitted);
      images.push_back(std::move(item));
    }
    return {{"id", scene.id},
            {"disparity_range", {{"near", scene.range.near_depth}, {"far", scene.range.far_depth}}},
            {"alpha", scene.profile.alpha},
            {"gamma", scene.gamma.gamma},
            {"images", std::move(images)}};
  }

  std::shared_ptr<const LoadedScene> find(const std::string& id) const {
    std::shared_lock lock(mutex_);
    const auto it = scenes_.find(id);
    if (it == scenes_.end()) throw RequestError(404, "unknown scene '" + id + "'");
    return it->second;
  }

  unsigned threads_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<const LoadedScene>> scenes_;
  int next_id_ = 0;
};

// ---------------------------------------------------------------------------
// HTTP binding

inline void bind_routes(httplib::Server& server, Service& service) {
  auto send = [](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  auto query = [](const httplib::Request& req) {
    std::map<std::string, std::string> q;
    for (const auto& [k, v] : req.params) q.emplace(k, v);
    return q;
  };
  server.Post("/scenes", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.load_scene(req.body));
  });
  server.Get(R"(/scenes/([^/]+))", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.get_scene(req.matches[1]));
  });
  server.Post(R"(/scenes/([^/]+)/render)", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.render(req.matches[1], req.body));
  });
  server.Get(R"(/scenes/([^/]+)/depth)", [&service, send, query](const httplib::Request& req, httplib::Response& res) {
    send(res, service.depth(req.matches[1], query(req)));
  });
  server.Get(R"(/scenes/([^/]+)/coc)", [&service, send, query](const httplib::Request& req, httplib::Response& res) {
    send(res, service.coc(req.matches[1], query(req)));
  });
  server.Post(R"(/scenes/([^/]+)/keyframes)", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.keyframes(req.matches[1], req.body));
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      res.set_content(Json{{"error", httplib::status_message(res.status)}}.dump() + "\n", "application/json");
    }
  });
}

struct ListenAddress {
  std::string host = "127.0.0.1";
  int port = 8080;
};

// DOFKIT_ADDR and DOFKIT_PORT override the defaults.
inline ListenAddress listen_address_from_env(ListenAddress fallback = {}) {
  if (const char* addr = std::getenv("DOFKIT_ADDR"); addr && *addr) fallback.host = addr;
  if (const char* port = std::getenv("DOFKIT_PORT"); port && *port) {
    try {
      fallback.port = std::stoi(port);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("DOFKIT_PORT is not a number: ") + port);
    }
  }
  return fallback;
}

}  // namespace dofkit
