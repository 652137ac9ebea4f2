#pragma once

#include <stdexcept>
#include <string>

#include "haltingvt/glimpser.hpp"
#include "haltingvt/halting.hpp"

namespace haltingvt {

struct ModelConfig {
    std::size_t layers = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t patch = 8;
    std::size_t frames = 8;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 1;
    std::size_t classes = 4;
    HaltingConfig halting;
    bool glimpser = false;
    GlimpseConfig glimpse;

    GridShape grid() const { return {frames, height / patch, width / patch}; }
    std::size_t tokens() const { return token_count(frames, height, width, patch); }
    std::size_t patch_dim() const { return patch * patch * channels; }

    void validate() const {
        if (layers < 1) {
            throw std::invalid_argument("model.layers must be >= 1");
        }
        if (dim == 0 || heads == 0 || dim % heads != 0) {
            throw std::invalid_argument("model.dim must be a positive multiple of model.heads");
        }
        if (frames < 2) {
            throw std::invalid_argument("model.frames must be >= 2");
        }
        if (channels == 0 || classes < 2) {
            throw std::invalid_argument("model.channels must be >= 1 and model.classes >= 2");
        }
        if (patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0) {
            throw std::invalid_argument("model.patch must divide model.height and model.width");
        }
        HaltingConfig h = halting;
        h.layers = layers;
        h.validate();
        glimpse.validate();
    }
};

}  // namespace haltingvt
