#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "nlos/core.hpp"
#include "nlos/forward.hpp"
#include "nlos/recon_factored.hpp"
#include "nlos/recon_linear.hpp"
#include "nlos/scene.hpp"

namespace nlos {

/// Unreadable, malformed or out-of-schema JSON configuration.
struct ConfigError : Error {
    using Error::Error;
};

inline constexpr const char* kSceneSchema = "nlos-scene/1";
inline constexpr const char* kSolverSchema = "nlos-solver/1";

using Json = nlohmann::json;

/// Everything `simulate` needs to produce a transient image.
struct SceneSpec {
    ScanGeometry geometry;
    Scene scene;
    Shading shading = Shading::Isotropic;
    std::uint32_t rays_per_pair = 1;
    std::optional<double> photons_at_peak;  // no noise when empty
    std::uint64_t noise_seed = 0;
};

struct SolverSpec {
    LinearSolverConfig linear;
    FactoredSolverConfig factored;
    double fbp_quantile = 0.0;
};

/// Settings used when no solver configuration is given.
inline SolverSpec default_solver_spec() {
    SolverSpec s;
    s.factored.linear_config = s.linear;
    return s;
}

namespace detail {

template <class T>
T get_or(const Json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("field '") + key + "': " + e.what());
    }
}

inline Vec3 vec3_from(const Json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != 3)
        throw ConfigError(std::string("field '") + key + "' must be a 3-element array");
    const auto& a = j.at(key);
    return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

inline Json vec3_to(const Vec3& v) { return Json::array({v.x, v.y, v.z}); }

inline void check_schema(const Json& j, const char* schema) {
    if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
    const auto s = get_or<std::string>(j, "schema", "");
    if (s != schema) throw ConfigError("expected schema '" + std::string(schema) + "', got '" + s + "'");
}

inline Surface surface_from(const Json& j) {
    Surface s;
    s.albedo = get_or(j, "albedo", s.albedo);
    if (j.contains("normal")) {
        const auto& n = j.at("normal");
        if (!n.is_array() || n.size() != 2) throw ConfigError("'normal' must be [u, v] in radians");
        s.normal_u = n[0].get<double>();
        s.normal_v = n[1].get<double>();
    }
    return s;
}

inline Json surface_to(const Surface& s) { return {{"albedo", s.albedo}, {"normal", {s.normal_u, s.normal_v}}}; }

inline Primitive primitive_from(const Json& j) {
    const auto type = get_or<std::string>(j, "type", "");
    if (type == "rect_patch")
        return RectPatch{vec3_from(j, "center"), get_or(j, "width", 0.0), get_or(j, "height", 0.0), surface_from(j)};
    if (type == "box") return AxisAlignedBox{vec3_from(j, "min"), vec3_from(j, "max"), surface_from(j)};
    if (type == "voxels") {
        VoxelImport v;
        v.surface = surface_from(j);
        for (const auto& idx : j.at("indices")) {
            if (!idx.is_array() || idx.size() != 3) throw ConfigError("voxel indices must be [x, y, z]");
            v.voxels.push_back({idx[0].get<std::uint32_t>(), idx[1].get<std::uint32_t>(), idx[2].get<std::uint32_t>()});
        }
        return v;
    }
    throw ConfigError("unknown primitive type '" + type + "'");
}

inline Json primitive_to(const Primitive& p) {
    return std::visit(
        [](const auto& prim) -> Json {
            using T = std::decay_t<decltype(prim)>;
            Json j = surface_to(prim.surface);
            if constexpr (std::is_same_v<T, RectPatch>) {
                j["type"] = "rect_patch";
                j["center"] = vec3_to(prim.center);
                j["width"] = prim.width;
                j["height"] = prim.height;
            } else if constexpr (std::is_same_v<T, AxisAlignedBox>) {
                j["type"] = "box";
                j["min"] = vec3_to(prim.lo);
                j["max"] = vec3_to(prim.hi);
            } else {
                j["type"] = "voxels";
                j["indices"] = Json::array();
                for (const auto& [x, y, z] : prim.voxels) j["indices"].push_back({x, y, z});
            }
            return j;
        },
        p);
}

inline Shading shading_from(const std::string& s) {
    if (s == "isotropic") return Shading::Isotropic;
    if (s == "lambertian") return Shading::Lambertian;
    throw ConfigError("shading must be 'isotropic' or 'lambertian'");
}

inline const char* shading_name(Shading s) { return s == Shading::Isotropic ? "isotropic" : "lambertian"; }

inline StepRule step_rule_from(const std::string& s) {
    if (s == "fixed") return StepRule::Fixed;
    if (s == "backtracking") return StepRule::Backtracking;
    if (s == "barzilai_borwein") return StepRule::BarzilaiBorwein;
    throw ConfigError("step_rule must be 'fixed', 'backtracking' or 'barzilai_borwein'");
}

inline const char* step_rule_name(StepRule r) {
    switch (r) {
        case StepRule::Fixed: return "fixed";
        case StepRule::Backtracking: return "backtracking";
        default: return "barzilai_borwein";
    }
}

}  // namespace detail

// Geometry: either the cube shorthand or every field spelled out.
inline ScanGeometry geometry_from_json(const Json& j) {
    using detail::get_or;
    ScanGeometry g;
    try {
        if (j.contains("time_bins")) {
            g.samples_per_axis = get_or<std::uint32_t>(j, "samples_per_axis", 1);
            g.voxels = {g.samples_per_axis, g.samples_per_axis,
                        get_or<std::uint32_t>(j, "depth_voxels", g.samples_per_axis)};
            g.wall_extent = get_or(j, "wall_extent", g.wall_extent);
            g.volume_origin_z = get_or(j, "volume_origin_z", g.volume_origin_z);
            g.voxel_pitch = get_or(j, "voxel_pitch", g.wall_extent / g.samples_per_axis);
            g.time_bins = get_or<std::uint32_t>(j, "time_bins", 1);
            g.bin_width = get_or(j, "bin_width", g.bin_width);
            g.light_speed = get_or(j, "light_speed", g.light_speed);
            g.falloff_exponent = get_or(j, "falloff_exponent", g.falloff_exponent);
            g.validate();
        } else {
            g = ScanGeometry::cube(get_or<std::uint32_t>(j, "samples_per_axis", 16), get_or(j, "wall_extent", 1.0),
                                   get_or(j, "standoff", 0.5), get_or(j, "bins_per_voxel", 2.0),
                                   get_or(j, "falloff_exponent", 4));
        }
    } catch (const GeometryError& e) {
        throw ConfigError(std::string("geometry: ") + e.what());
    }
    return g;
}

inline Json geometry_to_json(const ScanGeometry& g) {
    return {{"samples_per_axis", g.samples_per_axis}, {"depth_voxels", g.voxels.nz},
            {"wall_extent", g.wall_extent},           {"volume_origin_z", g.volume_origin_z},
            {"voxel_pitch", g.voxel_pitch},           {"time_bins", g.time_bins},
            {"bin_width", g.bin_width},               {"light_speed", g.light_speed},
            {"falloff_exponent", g.falloff_exponent}};
}

inline SceneSpec scene_from_json(const Json& j) {
    using detail::get_or;
    detail::check_schema(j, kSceneSchema);
    SceneSpec s;
    s.geometry = geometry_from_json(j.contains("geometry") ? j.at("geometry") : Json::object());
    s.shading = detail::shading_from(get_or<std::string>(j, "shading", "isotropic"));
    s.scene.occluder_threshold = get_or(j, "occluder_threshold", 0.0);
    s.rays_per_pair = get_or<std::uint32_t>(j, "rays_per_pair", 1);
    if (j.contains("noise")) {
        const auto& n = j.at("noise");
        s.photons_at_peak = get_or(n, "photons_at_peak", 1e6);
        s.noise_seed = get_or<std::uint64_t>(n, "seed", 0);
    }
    if (!j.contains("primitives") || !j.at("primitives").is_array()) throw ConfigError("'primitives' must be an array");
    for (const auto& p : j.at("primitives")) s.scene.primitives.push_back(detail::primitive_from(p));
    return s;
}

inline Json scene_to_json(const SceneSpec& s) {
    Json j = {{"schema", kSceneSchema},
              {"geometry", geometry_to_json(s.geometry)},
              {"shading", detail::shading_name(s.shading)},
              {"occluder_threshold", s.scene.occluder_threshold},
              {"rays_per_pair", s.rays_per_pair},
              {"primitives", Json::array()}};
    if (s.photons_at_peak) j["noise"] = {{"photons_at_peak", *s.photons_at_peak}, {"seed", s.noise_seed}};
    for (const auto& p : s.scene.primitives) j["primitives"].push_back(detail::primitive_to(p));
    return j;
}

inline LinearSolverConfig linear_config_from_json(const Json& j, LinearSolverConfig c = {}) {
    using detail::get_or;
    c.iterations = get_or(j, "iterations", c.iterations);
    c.sparsity_weight = get_or(j, "sparsity_weight", c.sparsity_weight);
    c.tv_weight = get_or(j, "tv_weight", c.tv_weight);
    c.admm_penalty = get_or(j, "admm_penalty", c.admm_penalty);
    c.cg_iterations = get_or(j, "cg_iterations", c.cg_iterations);
    c.nonnegativity = get_or(j, "nonnegativity", c.nonnegativity);
    return c;
}

inline Json linear_config_to_json(const LinearSolverConfig& c) {
    return {{"iterations", c.iterations},       {"sparsity_weight", c.sparsity_weight},
            {"tv_weight", c.tv_weight},         {"admm_penalty", c.admm_penalty},
            {"cg_iterations", c.cg_iterations}, {"nonnegativity", c.nonnegativity}};
}

inline SolverSpec solver_from_json(const Json& j) {
    using detail::get_or;
    detail::check_schema(j, kSolverSchema);
    SolverSpec s = default_solver_spec();
    if (j.contains("linear")) s.linear = linear_config_from_json(j.at("linear"), s.linear);
    if (j.contains("factored")) {
        const auto& f = j.at("factored");
        auto& c = s.factored;
        c.outer_iterations = get_or(f, "outer_iterations", c.outer_iterations);
        c.albedo_inner_iterations = get_or(f, "albedo_inner_iterations", c.albedo_inner_iterations);
        c.visibility_gradient_steps = get_or(f, "visibility_gradient_steps", c.visibility_gradient_steps);
        c.normal_solver_iterations = get_or(f, "normal_solver_iterations", c.normal_solver_iterations);
        if (f.contains("step_rule")) c.step_rule = detail::step_rule_from(f.at("step_rule").get<std::string>());
        c.initial_step = get_or(f, "initial_step", c.initial_step);
        c.rng_seed = get_or(f, "rng_seed", c.rng_seed);
        if (f.contains("shading")) c.shading = detail::shading_from(f.at("shading").get<std::string>());
        c.visibility_byte_budget = get_or(f, "visibility_byte_budget", c.visibility_byte_budget);
        if (f.contains("linear")) c.linear_config = linear_config_from_json(f.at("linear"), c.linear_config);
    }
    s.fbp_quantile = get_or(j, "fbp_quantile", s.fbp_quantile);
    try {
        s.linear.validate();
        s.factored.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return s;
}

inline Json solver_to_json(const SolverSpec& s) {
    const auto& c = s.factored;
    return {{"schema", kSolverSchema},
            {"linear", linear_config_to_json(s.linear)},
            {"factored",
             {{"outer_iterations", c.outer_iterations},
              {"albedo_inner_iterations", c.albedo_inner_iterations},
              {"visibility_gradient_steps", c.visibility_gradient_steps},
              {"normal_solver_iterations", c.normal_solver_iterations},
              {"step_rule", detail::step_rule_name(c.step_rule)},
              {"initial_step", c.initial_step},
              {"rng_seed", c.rng_seed},
              {"shading", detail::shading_name(c.shading)},
              {"visibility_byte_budget", c.visibility_byte_budget},
              {"linear", linear_config_to_json(c.linear_config)}}},
            {"fbp_quantile", s.fbp_quantile}};
}

inline Json load_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace nlos
