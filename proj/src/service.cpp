#include "promise/service.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

#include "promise/log.hpp"

#include "httplib.h"
#include "promise/volume_io.hpp"

namespace promise {

using nlohmann::json;

namespace {

std::pair<int64_t, int64_t> slice_dims(const Shape3 &s, int axis) {
    if (axis == 0) return {s.h, s.w};
    if (axis == 1) return {s.d, s.w};
    return {s.d, s.h};
}

Index3 slice_voxel(int axis, int64_t index, int64_t r, int64_t c) {
    if (axis == 0) return {index, r, c};
    if (axis == 1) return {r, index, c};
    return {r, c, index};
}

void check_slice(const Shape3 &s, int axis, int64_t index) {
    if (axis < 0 || axis > 2) throw std::out_of_range("axis must be 0, 1 or 2");
    if (index < 0 || index >= s[static_cast<std::size_t>(axis)])
        throw std::out_of_range("slice index " + std::to_string(index) + " out of range for axis " + std::to_string(axis));
}

void send_json(httplib::Response &res, int status, const json &body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response &res, int status, const std::string &msg) { send_json(res, status, {{"error", msg}}); }

double query_double(const httplib::Request &req, const char *key, double dflt) {
    if (!req.has_param(key)) return dflt;
    const auto v = req.get_param_value(key);
    std::size_t used = 0;
    double d = 0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception &) {
        used = 0;
    }
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(std::string("bad query parameter ") + key);
    return d;
}

} // namespace

Image2d render_slice(const FloatArray3 &v, int axis, int64_t index, double lo, double hi) {
    check_slice(v.shape(), axis, index);
    if (!(hi > lo)) throw std::invalid_argument("window requires hi > lo");
    const auto [rows, cols] = slice_dims(v.shape(), axis);
    Image2d img{cols, rows, 1, std::vector<uint8_t>(static_cast<std::size_t>(rows * cols))};
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
            const double t = (v[slice_voxel(axis, index, r, c)] - lo) / (hi - lo);
            img.pixels[static_cast<std::size_t>(r * cols + c)] =
                static_cast<uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
        }
    return img;
}

Image2d render_mask_slice(const MaskArray3 &m, int axis, int64_t index) {
    check_slice(m.shape(), axis, index);
    const auto [rows, cols] = slice_dims(m.shape(), axis);
    Image2d img{cols, rows, 2, std::vector<uint8_t>(static_cast<std::size_t>(rows * cols * 2))};
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) {
            const uint8_t on = m[slice_voxel(axis, index, r, c)] ? 255 : 0;
            img.pixels[static_cast<std::size_t>((r * cols + c) * 2)] = on;
            img.pixels[static_cast<std::size_t>((r * cols + c) * 2 + 1)] = on;
        }
    return img;
}

InferenceRequest parse_segment_request(const json &body, const Shape3 &bounds) {
    if (!body.is_object()) throw std::invalid_argument("request body must be a JSON object");
    for (const auto &item : body.items())
        if (item.key() != "points" && item.key() != "policy")
            throw std::invalid_argument("unknown field '" + item.key() + "'");
    if (!body.contains("points") || !body["points"].is_array() || body["points"].empty())
        throw std::invalid_argument("'points' must be a non-empty array");
    InferenceRequest req;
    if (body.contains("policy")) {
        if (!body["policy"].is_string()) throw std::invalid_argument("'policy' must be a string");
        req.policy = window_policy_from_string(body["policy"].get<std::string>());
    }
    static const char *axes[] = {"z", "y", "x"};
    for (const auto &pt : body["points"]) {
        if (!pt.is_object()) throw std::invalid_argument("each point must be an object");
        PointPrompt p;
        for (std::size_t a = 0; a < 3; ++a) {
            if (!pt.contains(axes[a]) || !pt[axes[a]].is_number())
                throw std::invalid_argument(std::string("point field '") + axes[a] + "' must be a number");
            const double c = pt[axes[a]].get<double>();
            if (!std::isfinite(c) || c < 0 || c > static_cast<double>(bounds[a] - 1))
                throw std::invalid_argument(std::string("point coordinate '") + axes[a] + "' outside the volume");
            p.position[a] = c;
        }
        if (!pt.contains("label") || !pt["label"].is_string())
            throw std::invalid_argument("point field 'label' must be \"fg\" or \"bg\"");
        const auto label = pt["label"].get<std::string>();
        if (label == "fg")
            p.label = PromptLabel::foreground;
        else if (label == "bg")
            p.label = PromptLabel::background;
        else
            throw std::invalid_argument("point field 'label' must be \"fg\" or \"bg\"");
        for (const auto &item : pt.items())
            if (item.key() != "z" && item.key() != "y" && item.key() != "x" && item.key() != "label")
                throw std::invalid_argument("unknown point field '" + item.key() + "'");
        req.prompts.push_back(p);
    }
    return req;
}

// ---------------------------------------------------------------------------

SegmentationService::SegmentationService(PromiseModel model, ServiceOptions opts)
    : model_(std::move(model)), opts_(opts), server_(std::make_unique<httplib::Server>()) {
    if (opts_.cache_capacity < 1) throw std::invalid_argument("service: cache capacity must be >= 1");
    model_->eval();
    install_routes();
}

SegmentationService::~SegmentationService() { stop(); }

int SegmentationService::start(const std::string &host, int port) {
    int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return bound;
}

void SegmentationService::serve_forever(const std::string &host, int port) {
    if (!server_->bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    log::info("serving on ", host, ":", port);
    server_->listen_after_bind();
}

void SegmentationService::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

std::string SegmentationService::add_volume(Volume source) {
    source.validate();
    auto entry = std::make_shared<VolumeEntry>();
    const auto &pre = model_->config().data.preprocess;
    entry->display = clip_and_normalize(source, foreground_by_rule(source, pre.foreground), pre).data;
    std::vector<float> vals = entry->display.values();
    entry->lo = percentile(vals, pre.clip_lo_pct);
    entry->hi = percentile(std::move(vals), pre.clip_hi_pct);
    if (!(entry->hi > entry->lo)) entry->hi = entry->lo + 1.0;
    const auto id = "vol-" + std::to_string(next_id_++);
    source.id = id;
    entry->source = std::move(source);

    std::lock_guard lock(cache_mutex_);
    volumes_[id] = entry;
    volume_order_.push_front(id);
    while (volume_order_.size() > opts_.cache_capacity) {
        volumes_.erase(volume_order_.back());
        volume_order_.pop_back();
    }
    return id;
}

std::shared_ptr<SegmentationService::VolumeEntry> SegmentationService::find_volume(const std::string &id) {
    std::lock_guard lock(cache_mutex_);
    const auto it = volumes_.find(id);
    if (it == volumes_.end()) return nullptr;
    volume_order_.remove(id);
    volume_order_.push_front(id);
    return it->second;
}

std::shared_ptr<const LabelMask> SegmentationService::find_mask(const std::string &id) const {
    std::lock_guard lock(cache_mutex_);
    const auto it = masks_.find(id);
    return it == masks_.end() ? nullptr : it->second;
}

std::optional<LabelMask> SegmentationService::mask(const std::string &mask_id) const {
    auto m = find_mask(mask_id);
    if (!m) return std::nullopt;
    return *m;
}

std::size_t SegmentationService::cached_volumes() const {
    std::lock_guard lock(cache_mutex_);
    return volumes_.size();
}

std::string SegmentationService::segment(const std::string &volume_id, const InferenceRequest &req) {
    auto entry = find_volume(volume_id);
    if (!entry) throw std::out_of_range("unknown volume " + volume_id);
    std::unique_lock busy(entry->busy, std::try_to_lock);
    if (!busy.owns_lock()) throw Busy("inference already running for volume " + volume_id);
    LabelMask result;
    {
        std::lock_guard serial(inference_mutex_);
        result = infer_source_volume(*model_, entry->source, req);
    }
    const auto id = "mask-" + std::to_string(next_id_++);
    std::lock_guard lock(cache_mutex_);
    masks_[id] = std::make_shared<const LabelMask>(std::move(result));
    mask_order_.push_front(id);
    while (mask_order_.size() > opts_.mask_capacity) {
        masks_.erase(mask_order_.back());
        mask_order_.pop_back();
    }
    return id;
}

void SegmentationService::install_routes() {
    auto &srv = *server_;

    srv.Get("/healthz", [this](const httplib::Request &, httplib::Response &res) {
        send_json(res, 200, {{"status", "ok"}, {"volumes", cached_volumes()}});
    });

    srv.Post("/volumes", [this](const httplib::Request &req, httplib::Response &res) {
        std::string bytes = req.body;
        if (req.is_multipart_form_data()) {
            if (!req.has_file("file")) return send_error(res, 422, "multipart upload needs a 'file' part");
            bytes = req.get_file_value("file").content;
        }
        if (bytes.empty()) return send_error(res, 422, "empty upload");
        Volume v;
        try {
            v = decode_nifti(bytes);
        } catch (const std::exception &e) {
            return send_error(res, 422, std::string("cannot read NIfTI: ") + e.what());
        }
        std::string id;
        try {
            id = add_volume(v);
        } catch (const std::exception &e) {
            return send_error(res, 422, e.what());
        }
        const auto &s = v.shape();
        send_json(res, 201, {{"volume_id", id}, {"shape", {s.d, s.h, s.w}}, {"spacing", v.spacing}});
    });

    srv.Get(R"(/volumes/([^/]+)/slices/(-?\d+)/(-?\d+))", [this](const httplib::Request &req, httplib::Response &res) {
        auto entry = find_volume(req.matches[1]);
        if (!entry) return send_error(res, 404, "unknown volume");
        try {
            const double lo = query_double(req, "lo", entry->lo), hi = query_double(req, "hi", entry->hi);
            const auto img = render_slice(entry->display, std::stoi(req.matches[2]), std::stoll(req.matches[3]), lo, hi);
            res.set_content(encode_png(img), "image/png");
        } catch (const std::out_of_range &e) {
            send_error(res, 422, e.what());
        } catch (const std::invalid_argument &e) {
            send_error(res, 422, e.what());
        }
    });

    srv.Post(R"(/volumes/([^/]+)/segment)", [this](const httplib::Request &req, httplib::Response &res) {
        const std::string vid = req.matches[1];
        auto entry = find_volume(vid);
        if (!entry) return send_error(res, 404, "unknown volume");
        InferenceRequest ir;
        try {
            ir = parse_segment_request(json::parse(req.body), entry->source.shape());
        } catch (const json::exception &e) {
            return send_error(res, 422, std::string("malformed JSON: ") + e.what());
        } catch (const std::invalid_argument &e) {
            return send_error(res, 422, e.what());
        }
        ir.volume_id = vid;
        try {
            const auto mask_id = segment(vid, ir);
            send_json(res, 200, {{"mask_id", mask_id}, {"dice", nullptr}});
        } catch (const Busy &e) {
            send_error(res, 409, e.what());
        } catch (const std::out_of_range &e) {
            send_error(res, 404, e.what());
        } catch (const std::exception &e) {
            send_error(res, 500, e.what());
        }
    });

    srv.Get(R"(/masks/([^/]+)/slices/(-?\d+)/(-?\d+))", [this](const httplib::Request &req, httplib::Response &res) {
        auto m = find_mask(req.matches[1]);
        if (!m) return send_error(res, 404, "unknown mask");
        try {
            res.set_content(encode_png(render_mask_slice(m->data, std::stoi(req.matches[2]), std::stoll(req.matches[3]))),
                            "image/png");
        } catch (const std::out_of_range &e) {
            send_error(res, 422, e.what());
        }
    });

    srv.Get(R"(/masks/([^/]+))", [this](const httplib::Request &req, httplib::Response &res) {
        auto m = find_mask(req.matches[1]);
        if (!m) return send_error(res, 404, "unknown mask");
        res.set_header("Content-Disposition", "attachment; filename=\"" + std::string(req.matches[1]) + ".nii.gz\"");
        res.set_content(encode_nifti(*m, true), "application/gzip");
    });
}

} // namespace promise
