#pragma once

#include <atomic>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "json.hpp"
#include "promise/inference.hpp"
#include "promise/model.hpp"
#include "promise/png_writer.hpp"
#include "promise/volume.hpp"

namespace httplib {
class Server;
}

namespace promise {

/// Slice of a 3D array orthogonal to `axis` (0, 1 or 2): rows and columns are the two
/// remaining axes in increasing order.
Image2d render_slice(const FloatArray3 &v, int axis, int64_t index, double lo, double hi);
/// Gray + alpha slice: white where the mask is set, alpha 255 there and 0 elsewhere.
Image2d render_mask_slice(const MaskArray3 &m, int axis, int64_t index);

/// Parses {"points": [{"z","y","x","label": "fg"|"bg"}], "policy"?}; throws std::invalid_argument.
InferenceRequest parse_segment_request(const nlohmann::json &body, const Shape3 &bounds);

struct ServiceOptions {
    std::size_t cache_capacity = 8;
    std::size_t mask_capacity = 32;
};

class SegmentationService {
public:
    explicit SegmentationService(PromiseModel model, ServiceOptions opts = {});
    ~SegmentationService();
    SegmentationService(const SegmentationService &) = delete;
    SegmentationService &operator=(const SegmentationService &) = delete;

    /// Binds (port 0 picks a free port) and serves on a background thread; returns the port.
    int start(const std::string &host = "127.0.0.1", int port = 0);
    /// Binds and serves on the calling thread.
    void serve_forever(const std::string &host, int port);
    void stop();

    // Library-level operations behind the HTTP routes.
    std::string add_volume(Volume source);
    std::string segment(const std::string &volume_id, const InferenceRequest &req);
    std::optional<LabelMask> mask(const std::string &mask_id) const;
    std::size_t cached_volumes() const;

private:
    struct VolumeEntry {
        Volume source;
        FloatArray3 display; // intensity-normalised on the source grid
        double lo = 0.0, hi = 1.0;
        std::mutex busy;
    };

    class Busy : public std::runtime_error {
    public:
        using std::runtime_error::runtime_error;
    };

    void install_routes();
    std::shared_ptr<VolumeEntry> find_volume(const std::string &id);
    std::shared_ptr<const LabelMask> find_mask(const std::string &id) const;

    PromiseModel model_;
    ServiceOptions opts_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;

    mutable std::mutex cache_mutex_;
    std::list<std::string> volume_order_; // most recent first
    std::map<std::string, std::shared_ptr<VolumeEntry>> volumes_;
    std::list<std::string> mask_order_;
    std::map<std::string, std::shared_ptr<const LabelMask>> masks_;
    std::mutex inference_mutex_;
    std::atomic<uint64_t> next_id_{1};
};

} // namespace promise
